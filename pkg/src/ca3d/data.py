"""Datasets: synthetic motion classification and frame-folder ingestion.

Each synthetic clip shows one bright blob on a noisy background. Along the
class axis the blob translates at a fixed velocity (wrapping at the border);
along the orthogonal axis it revisits the positions of the same full-period
comb in a random, non-cyclic order. The class is the translation direction
(left/right/up/down). Start phases are uniform, so no single frame carries
class information; both axis marginals of the position set are identical
combs for every class, so the unordered frame set is class-symmetric too and
only the inter-frame motion identifies the class.
"""

import os

import numpy as np

CLASSES = ("left", "right", "up", "down")
_VELOCITIES = {
    0: (0, -1),  # left: dx negative
    1: (0, 1),   # right
    2: (-1, 0),  # up: dy negative
    3: (1, 0),   # down
}


class SyntheticMotionDataset:
    def __init__(self, seed, num_samples, clip_shape=(3, 8, 16, 16), speed=2.0, noise=0.25,
                 sigma=1.2):
        c, t, h, w = clip_shape
        if num_samples < 4:
            raise ValueError("need at least one sample per class")
        if t < 2:
            raise ValueError("motion needs at least two frames")
        if c != 3 or h < 8 or w < 8:
            raise ValueError("degenerate clip dimensions")
        if speed < 1.0:
            raise ValueError("motion magnitude must be at least one pixel per frame")
        self.seed = seed
        self.clip_shape = tuple(clip_shape)
        self.speed = float(speed)
        self.noise = float(noise)
        self.sigma = float(sigma)
        self.num_classes = len(CLASSES)
        rng = np.random.default_rng(seed)
        self.labels = np.arange(num_samples) % self.num_classes
        self.clips = np.empty((num_samples,) + self.clip_shape, dtype=np.float64)
        for i in range(num_samples):
            label = int(self.labels[i])
            # resample the rare clips whose incoherent twin happens to mimic a
            # stronger coherent motion than the labeled mover
            while True:
                clip = self._render(rng, label)
                if label_clip(clip, self.speed) == label:
                    break
            self.clips[i] = clip

    def _incoherent_order(self, rng, t):
        """Random comb visit order whose jumps span >= 2 comb steps.

        Large hops keep the orthogonal coordinate's frame-to-frame moves well
        away from the class axis's single-step drift; constant-gap (cyclic)
        patterns are rejected because they would read as smooth motion.
        """
        min_gap = 2 if t >= 6 else 1
        fallback = None
        for _ in range(1000):
            order = rng.permutation(t)
            if t <= 3:
                return order
            steps = np.diff(np.concatenate([order, order[:1]])) % t
            gaps = np.minimum(steps, t - steps)
            if np.all(steps == steps[0]):
                continue  # cyclic shift of a coherent traversal
            if fallback is None:
                fallback = order
            if np.any(gaps < min_gap):
                continue  # a small hop would mimic the drift axis
            return order
        return fallback

    def _stamp(self, clip, base, py, px):
        c, _, h, w = self.clip_shape
        yy, xx = np.mgrid[0:h, 0:w]
        wy = np.minimum(np.abs(yy - py), h - np.abs(yy - py))
        wx = np.minimum(np.abs(xx - px), w - np.abs(xx - px))
        blob = np.exp(-(wy ** 2 + wx ** 2) / (2 * self.sigma ** 2))
        return base[:, None, None] * blob[None, :, :]

    def _render(self, rng, label):
        c, t, h, w = self.clip_shape
        dy, dx = _VELOCITIES[label]
        base = np.array([0.95, 0.85, 0.75]) * rng.uniform(0.92, 1.0)
        clip = rng.uniform(0.0, self.noise, size=(c, t, h, w))
        y0, x0 = rng.uniform(0, h), rng.uniform(0, w)
        order = self._incoherent_order(rng, t)
        for ti in range(t):
            if dx != 0:  # horizontal class: x drifts, y hops its comb
                px = (x0 + dx * self.speed * ti) % w
                py = (y0 + self.speed * order[ti]) % h
            else:
                py = (y0 + dy * self.speed * ti) % h
                px = (x0 + self.speed * order[ti]) % w
            clip[:, ti] += self._stamp(clip, base, py, px)
        return np.clip(clip, 0.0, 1.0)

    def __len__(self):
        return len(self.labels)

    def get(self, i):
        return self.clips[i], int(self.labels[i])

    def batch(self, indices):
        return self.clips[indices], self.labels[indices]


def label_clip(clip, speed=2.0):
    """Infer the motion class from wrap-aware inter-frame displacements.

    This is the generator's own labeling function: the argmax of each
    consecutive-frame circular cross-correlation gives that pair's blob
    displacement; the class axis is the one accumulating consistent steps of
    magnitude <= speed+1 (the comb hops on the other axis are larger), and
    the accumulated sign gives the class.
    """
    frames = np.asarray(clip, dtype=np.float64).mean(axis=0)  # (T, H, W)
    t, h, w = frames.shape
    sum_x = 0.0
    sum_y = 0.0
    for i in range(t - 1):
        a = frames[i] - frames[i].mean()
        b = frames[i + 1] - frames[i + 1].mean()
        corr = np.fft.irfft2(np.conj(np.fft.rfft2(a)) * np.fft.rfft2(b), s=(h, w))
        dy, dx = np.unravel_index(np.argmax(corr), corr.shape)
        if dy > h // 2:
            dy -= h
        if dx > w // 2:
            dx -= w
        if abs(dx) <= speed + 1:
            sum_x += dx
        if abs(dy) <= speed + 1:
            sum_y += dy
    if abs(sum_x) >= abs(sum_y):
        return 0 if sum_x < 0 else 1
    return 2 if sum_y < 0 else 3


def generate_synthetic(seed, n, t=8, h=16, w=16, speed=2.0, noise=0.25):
    """Balanced deterministic synthetic motion dataset with clips (3,t,h,w)."""
    return SyntheticMotionDataset(seed, n, (3, t, h, w), speed, noise)


class FrameFolderDataset:
    """Clips from root/<class>/<clip>/<frame images>, resized to 112x112.

    Frames are uniformly subsampled to `clip_len`; images are resized so the
    short side matches `size` and then center-cropped. Pixels are RGB in
    [0, 1]; no other features are derived.
    """

    EXTS = (".png", ".jpg", ".jpeg", ".bmp")

    def __init__(self, root, clip_len=16, size=112):
        self.root = root
        self.clip_len = clip_len
        self.size = size
        if not os.path.isdir(root):
            raise FileNotFoundError(f"dataset root {root!r} is not a directory")
        self.class_names = sorted(
            d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
        )
        if not self.class_names:
            raise ValueError(f"no class directories under {root!r}")
        self.num_classes = len(self.class_names)
        self.samples = []
        for ci, cname in enumerate(self.class_names):
            cdir = os.path.join(root, cname)
            for clip_name in sorted(os.listdir(cdir)):
                clip_dir = os.path.join(cdir, clip_name)
                if not os.path.isdir(clip_dir):
                    continue
                frames = sorted(
                    os.path.join(clip_dir, f)
                    for f in os.listdir(clip_dir)
                    if f.lower().endswith(self.EXTS)
                )
                if frames:
                    self.samples.append((ci, frames))
        if not self.samples:
            raise ValueError(f"no clips found under {root!r}")
        self.labels = np.array([ci for ci, _ in self.samples])

    def __len__(self):
        return len(self.samples)

    def _load_frame(self, path):
        from PIL import Image

        img = Image.open(path).convert("RGB")
        short = min(img.size)
        scale = self.size / short
        img = img.resize((max(self.size, round(img.width * scale)),
                          max(self.size, round(img.height * scale))), Image.BILINEAR)
        left = (img.width - self.size) // 2
        top = (img.height - self.size) // 2
        img = img.crop((left, top, left + self.size, top + self.size))
        return np.asarray(img, dtype=np.float64).transpose(2, 0, 1) / 255.0

    def get(self, i):
        label, frames = self.samples[i]
        idx = np.linspace(0, len(frames) - 1, self.clip_len).round().astype(int)
        clip = np.stack([self._load_frame(frames[j]) for j in idx], axis=1)
        return clip, label

    def batch(self, indices):
        clips, labels = zip(*(self.get(i) for i in indices))
        return np.stack(clips), np.array(labels)
