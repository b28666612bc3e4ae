"""Synthetic few-shot segmentation tasks, episodic sampling, augmentation,
and a small on-disk dataset format.

Each task is a family of grayscale images showing one parametric shape kind
(ellipse, rectangle, triangle, ring, cross, star) rendered at random
position, scale, and rotation over a textured background, with the exact
rendering as its binary mask.  Families differ in shape kind, brightness
polarity, texture, and noise level.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .ops import ContractViolation

SHAPE_KINDS = ("ellipse", "rectangle", "triangle", "ring", "cross", "star")

MIN_FG_FRACTION = 0.02
MAX_FG_FRACTION = 0.6


class Example(NamedTuple):
    image: np.ndarray  # (1, H, W) in [0, 1]
    mask: np.ndarray   # (H, W) in {0, 1}


@dataclass(frozen=True)
class FamilySpec:
    """Generator parameters shared by all examples of one task family."""

    kind: str
    bg_level: float
    fg_level: float
    bg_tex_amp: float
    bg_tex_freq: tuple
    bg_tex_phase: float
    fg_tex_amp: float
    fg_tex_freq: tuple
    fg_tex_phase: float
    noise_sigma: float
    size_range: tuple
    aspect: float
    detail: float  # ring hole / cross arm width / star depth, per kind
    level_jitter: float
    distractor_kind: str
    distractor_contrast: float  # fraction of the foreground contrast


@dataclass
class Task:
    id: str
    examples: list
    family_spec: FamilySpec | None = None


@dataclass
class Episode:
    train: list
    val: list
    sampling_mode: str
    train_indices: list
    val_indices: list


@dataclass
class TaskSplit:
    train_tasks: list
    val_tasks: list
    test_tasks: list


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

def _shape_mask(kind, hw, center, scale, angle, aspect, detail, star_points):
    """Exact binary rendering of one shape on the pixel-center grid."""
    ys, xs = np.mgrid[0:hw, 0:hw].astype(float)
    dx, dy = xs - center[0], ys - center[1]
    c, s = np.cos(-angle), np.sin(-angle)
    u = c * dx - s * dy
    v = s * dx + c * dy
    a, b = scale, scale * aspect
    if kind == "ellipse":
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    if kind == "triangle":
        # isoceles triangle: apex up, base at v = -b
        p1, p2, p3 = (0.0, b), (-a, -b), (a, -b)
        def half(pa, pb):
            return (pb[0] - pa[0]) * (v - pa[1]) - (pb[1] - pa[1]) * (u - pa[0])
        d1, d2, d3 = half(p1, p2), half(p2, p3), half(p3, p1)
        return ((d1 >= 0) & (d2 >= 0) & (d3 >= 0)) | ((d1 <= 0) & (d2 <= 0) & (d3 <= 0))
    if kind == "ring":
        d = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        return (d <= 1.0) & (d >= detail)
    if kind == "cross":
        w = a * detail
        return ((np.abs(u) <= w) & (np.abs(v) <= a)) | \
               ((np.abs(v) <= w) & (np.abs(u) <= a))
    if kind == "star":
        phi = np.arctan2(v, u)
        radius = a * (1.0 - detail * (0.5 + 0.5 * np.cos(star_points * phi)))
        return np.sqrt(u * u + v * v) <= radius
    raise ContractViolation(f"unknown shape kind {kind!r}")


def _texture(hw, level, amp, freq, phase):
    ys, xs = np.mgrid[0:hw, 0:hw].astype(float)
    return level + amp * np.sin(
        2.0 * np.pi * (freq[0] * xs / hw + freq[1] * ys / hw) + phase)


def _make_family_spec(kind, index, rng):
    # levels are centered so the opposite-polarity distractor stays in range
    bg = rng.uniform(0.38, 0.58)
    delta = rng.uniform(0.25, 0.38) * (1.0 if rng.random() < 0.5 else -1.0)
    fg = bg + delta
    detail_by_kind = {
        "ring": rng.uniform(0.35, 0.6),
        "cross": rng.uniform(0.25, 0.4),
        "star": rng.uniform(0.4, 0.65),
    }
    other_kinds = [k for k in SHAPE_KINDS if k != kind]
    return FamilySpec(
        kind=kind,
        bg_level=bg,
        fg_level=fg,
        bg_tex_amp=rng.uniform(0.05, 0.15),
        bg_tex_freq=(rng.uniform(1.0, 4.0), rng.uniform(1.0, 4.0)),
        bg_tex_phase=rng.uniform(0.0, 2.0 * np.pi),
        fg_tex_amp=rng.uniform(0.0, 0.08),
        fg_tex_freq=(rng.uniform(1.0, 4.0), rng.uniform(1.0, 4.0)),
        fg_tex_phase=rng.uniform(0.0, 2.0 * np.pi),
        noise_sigma=rng.uniform(0.01, 0.06),
        size_range=(0.18, 0.3),
        aspect=rng.uniform(0.55, 1.0),
        detail=detail_by_kind.get(kind, 0.0),
        level_jitter=rng.uniform(0.02, 0.08),
        distractor_kind=other_kinds[int(rng.integers(0, len(other_kinds)))],
        distractor_contrast=rng.uniform(0.9, 1.1),
    )


def _render_example(spec, hw, rng, star_points):
    """One image-mask pair: the family's shape plus an opposite-polarity
    distractor of another kind that is NOT part of the mask.

    Every image shows one blob brighter and one darker than the background,
    with matched size and placement statistics; which polarity is the
    foreground is a family-level property, so it cannot be inferred from a
    single image and must be picked up from the support examples."""
    for _ in range(64):
        center = (rng.uniform(0.3, 0.7) * hw, rng.uniform(0.3, 0.7) * hw)
        scale = rng.uniform(*spec.size_range) * hw
        angle = rng.uniform(0.0, np.pi)
        mask = _shape_mask(spec.kind, hw, center, scale, angle,
                           spec.aspect, spec.detail, star_points)
        frac = mask.mean()
        if MIN_FG_FRACTION <= frac <= MAX_FG_FRACTION:
            break
    else:
        raise ContractViolation(
            f"could not render {spec.kind} with in-range foreground at hw={hw}")
    d_center = (rng.uniform(0.3, 0.7) * hw, rng.uniform(0.3, 0.7) * hw)
    d_scale = rng.uniform(*spec.size_range) * hw
    d_angle = rng.uniform(0.0, np.pi)
    distractor = _shape_mask(spec.distractor_kind, hw, d_center, d_scale,
                             d_angle, spec.aspect, spec.detail, star_points)

    jitter = rng.uniform(-spec.level_jitter, spec.level_jitter)
    bg = _texture(hw, spec.bg_level + jitter, spec.bg_tex_amp,
                  spec.bg_tex_freq, spec.bg_tex_phase)
    fg = _texture(hw, spec.fg_level + jitter, spec.fg_tex_amp,
                  spec.fg_tex_freq, spec.fg_tex_phase)
    # the distractor mirrors the foreground contrast to the other side of
    # the background level, with the same texture statistics
    d_level = (spec.bg_level + jitter
               - (spec.fg_level - spec.bg_level) * spec.distractor_contrast)
    d_tex = _texture(hw, float(np.clip(d_level, 0.02, 0.98)), spec.fg_tex_amp,
                     spec.fg_tex_freq, spec.fg_tex_phase)
    img = np.where(distractor, d_tex, bg)
    img = np.where(mask, fg, img)  # the true shape overwrites the distractor
    img = img + rng.normal(0.0, spec.noise_sigma, (hw, hw))
    img = np.clip(img, 0.0, 1.0)
    # quantize to the 8-bit grid so disk export/import round-trips exactly
    img = np.round(img * 255.0) / 255.0
    return Example(image=img[None, :, :], mask=mask.astype(np.float64))


def generate_task_library(num_families, examples_per_task, hw, master_seed):
    """Deterministic library of synthetic tasks.

    Families cycle through the shape kinds with per-family texture, polarity,
    and noise parameters; every mask has a foreground fraction inside
    [0.02, 0.6].  A fixed ``master_seed`` reproduces the library bitwise.
    """
    if num_families < 4:
        raise ContractViolation("need at least 4 task families")
    if examples_per_task < 10:
        raise ContractViolation("need at least 10 examples per task")
    if hw < 16:
        raise ContractViolation(f"hw={hw} too small to render shapes")
    seeds = np.random.SeedSequence(master_seed).spawn(num_families)
    tasks = []
    for i in range(num_families):
        rng = np.random.default_rng(seeds[i])
        kind = SHAPE_KINDS[i % len(SHAPE_KINDS)]
        spec = _make_family_spec(kind, i, rng)
        star_points = int(rng.integers(5, 8))
        examples = [_render_example(spec, hw, rng, star_points)
                    for _ in range(examples_per_task)]
        tasks.append(Task(id=f"{kind}_{i:03d}", examples=examples,
                          family_spec=spec))
    return tasks


# ---------------------------------------------------------------------------
# episodic sampling
# ---------------------------------------------------------------------------

def sample_episode(task, train_shots, val_shots, mode, rng):
    """Draw the two mini-sets of an episode.

    ``disjoint`` partitions a random permutation of the pool;
    ``with_replacement_union`` draws both sets independently with
    replacement from the whole pool, so they may overlap.
    """
    n = len(task.examples)
    if mode == "disjoint":
        if train_shots + val_shots > n:
            raise ContractViolation(
                f"disjoint episode needs {train_shots + val_shots} examples, "
                f"task {task.id} has {n}")
        perm = rng.permutation(n)
        tr = perm[:train_shots].tolist()
        va = perm[train_shots:train_shots + val_shots].tolist()
    elif mode == "with_replacement_union":
        tr = rng.integers(0, n, size=train_shots).tolist()
        va = rng.integers(0, n, size=val_shots).tolist()
    else:
        raise ContractViolation(f"unknown sampling mode {mode!r}")
    return Episode(train=[task.examples[i] for i in tr],
                   val=[task.examples[i] for i in va],
                   sampling_mode=mode, train_indices=tr, val_indices=va)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def hflip(example):
    """Mirror image and mask about the vertical axis (its own inverse)."""
    return Example(image=example.image[:, :, ::-1].copy(),
                   mask=example.mask[:, ::-1].copy())


def augment(example, aug_rate, rng):
    """Randomly perturb one example; each transform fires with probability
    ``aug_rate``.

    Geometric transforms (horizontal flip, rotation up to 25 degrees,
    translation up to 20% of the extent) move image and mask together, the
    mask with nearest-neighbor resampling and zero padding, the image with
    bilinear resampling and reflection padding.  Photometric transforms
    (Gaussian noise sigma <= 0.05, brightness shift <= 0.2, a noise-filled
    eraser rectangle covering <= 25% of the area) touch the image only.
    With ``aug_rate`` 0 the example is returned unchanged and the rng is
    not consumed.  Draw order: flip, rotation, translation, noise,
    brightness, eraser.
    """
    if aug_rate == 0.0:
        return example
    if not 0.0 <= aug_rate <= 1.0:
        raise ContractViolation(f"aug_rate must be in [0, 1], got {aug_rate}")
    img = example.image[0].copy()
    mask = example.mask.copy()
    h, w = mask.shape

    if rng.random() < aug_rate:
        img = img[:, ::-1].copy()
        mask = mask[:, ::-1].copy()

    angle = np.deg2rad(rng.uniform(-25.0, 25.0)) if rng.random() < aug_rate else 0.0
    if rng.random() < aug_rate:
        shift = (rng.uniform(-0.2, 0.2) * h, rng.uniform(-0.2, 0.2) * w)
    else:
        shift = (0.0, 0.0)
    if angle != 0.0 or shift != (0.0, 0.0):
        c, s = np.cos(angle), np.sin(angle)
        matrix = np.array([[c, -s], [s, c]])
        center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        offset = center - matrix @ (center + np.asarray(shift))
        img = ndimage.affine_transform(img, matrix, offset=offset, order=1,
                                       mode="reflect")
        mask = ndimage.affine_transform(mask, matrix, offset=offset, order=0,
                                        mode="constant", cval=0.0)

    if rng.random() < aug_rate:
        img = img + rng.normal(0.0, rng.uniform(0.0, 0.05), img.shape)
    if rng.random() < aug_rate:
        img = img + rng.uniform(-0.2, 0.2)
    if rng.random() < aug_rate:
        eh = max(1, int(rng.uniform(0.1, 0.5) * h))
        ew = max(1, int(rng.uniform(0.1, 0.5) * w))
        top = int(rng.integers(0, h - eh + 1))
        left = int(rng.integers(0, w - ew + 1))
        img[top:top + eh, left:left + ew] = rng.random((eh, ew))

    return Example(image=np.clip(img, 0.0, 1.0)[None, :, :], mask=mask)


# ---------------------------------------------------------------------------
# dataset directory format (binary PGM pairs)
# ---------------------------------------------------------------------------

def _read_pgm(path):
    data = Path(path).read_bytes()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            ch = data[pos:pos + 1]
            if ch == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        return data[start:pos]

    if token() != b"P5":
        raise ContractViolation(f"{path}: not a binary PGM (P5) file")
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise ContractViolation(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise ContractViolation(f"{path}: expected 8-bit PGM, maxval={maxval}")
    pos += 1  # single whitespace after maxval
    raster = data[pos:pos + width * height]
    if len(raster) != width * height:
        raise ContractViolation(f"{path}: truncated raster data")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width)


def _write_pgm(path, arr):
    arr = np.asarray(arr, dtype=np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.tobytes())


def load_dataset(path):
    """Load tasks from ``<root>/<task_id>/<k >.img.pgm`` + ``<k>.mask.pgm``
    pairs; images scale to [0, 1], masks binarize at 128."""
    root = Path(path)
    if not root.is_dir():
        raise ContractViolation(f"dataset directory {root} does not exist")
    task_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not task_dirs:
        warnings.warn(f"dataset directory {root} contains no tasks")
        return []
    tasks = []
    for tdir in task_dirs:
        images = sorted(tdir.glob("*.img.pgm"))
        masks = sorted(tdir.glob("*.mask.pgm"))
        mask_stems = {m.name[:-len(".mask.pgm")] for m in masks}
        img_stems = {f.name[:-len(".img.pgm")] for f in images}
        examples = []
        for f in images:
            stem = f.name[:-len(".img.pgm")]
            if stem not in mask_stems:
                raise ContractViolation(f"missing mask for {tdir.name}/{stem}")
            img = _read_pgm(f)
            msk = _read_pgm(tdir / f"{stem}.mask.pgm")
            if img.shape != msk.shape:
                raise ContractViolation(
                    f"size mismatch for {tdir.name}/{stem}: "
                    f"image {img.shape} vs mask {msk.shape}")
            examples.append(Example(
                image=(img.astype(np.float64) / 255.0)[None, :, :],
                mask=(msk >= 128).astype(np.float64)))
        orphan = mask_stems - img_stems
        if orphan:
            raise ContractViolation(
                f"missing image for {tdir.name}/{sorted(orphan)[0]}")
        tasks.append(Task(id=tdir.name, examples=examples))
    return tasks


def save_dataset(tasks, path):
    """Export tasks to the PGM directory format read by load_dataset."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for task in tasks:
        tdir = root / task.id
        tdir.mkdir(exist_ok=True)
        for k, ex in enumerate(task.examples):
            _write_pgm(tdir / f"{k:03d}.img.pgm",
                       np.round(ex.image[0] * 255.0))
            _write_pgm(tdir / f"{k:03d}.mask.pgm", ex.mask * 255.0)


# ---------------------------------------------------------------------------
# task splits
# ---------------------------------------------------------------------------

def split_tasks(tasks, fractions, seed):
    """Deterministic shuffle-then-partition into train/val/test id lists."""
    if len(fractions) != 3:
        raise ContractViolation("fractions must be (train, val, test)")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractViolation(f"fractions must sum to 1, got {sum(fractions)}")
    ids = [t.id for t in tasks]
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    n = len(ids)
    b1 = round(fractions[0] * n)
    b2 = round((fractions[0] + fractions[1]) * n)
    return TaskSplit(train_tasks=shuffled[:b1], val_tasks=shuffled[b1:b2],
                     test_tasks=shuffled[b2:])


def select_tasks(tasks, ids):
    """Tasks with the given ids, in the given order."""
    by_id = {t.id: t for t in tasks}
    return [by_id[i] for i in ids]
