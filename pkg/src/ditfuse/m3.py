"""Training-data construction: degradation plans, M3 pairs, task targets and manifests."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ditfuse import imaging, kernels
from ditfuse import prompt as P
from ditfuse.imaging import Degradation

CATEGORIES = ("m3", "seg", "control", "fusion")
DEFAULT_WEIGHTS = {"m3": 0.55, "seg": 0.30, "control": 0.107, "fusion": 0.043}
FUSION_SUBTASKS = P.TASK_SUBTAGS["FUSION"]


class IndivisibleGrid(ValueError):
    pass


class MissingInput(ValueError):
    pass


class EmptyPool(ValueError):
    pass


class CellAssign(IntEnum):
    A = 0  # degraded only in view A
    B = 1  # degraded only in view B
    BOTH = 2


@dataclass(frozen=True)
class CellOp:
    kind: Degradation
    sigma: float | None = None

    @property
    def params(self) -> dict:
        return {} if self.sigma is None else {"sigma": self.sigma}


@dataclass
class DegradationPlan:
    grid_px: int
    cells: np.ndarray  # (rows, cols) of CellAssign values
    ops: list[list[CellOp]]

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape[0] * self.grid_px, self.cells.shape[1] * self.grid_px

    def count(self, assign: CellAssign) -> int:
        return int((self.cells == assign).sum())

    def cell_slices(self, r: int, c: int) -> tuple[slice, slice]:
        g = self.grid_px
        return slice(r * g, (r + 1) * g), slice(c * g, (c + 1) * g)


@dataclass(frozen=True)
class DegradeRanges:
    blur_sigma: tuple[float, float] = (1.0, 3.0)
    noise_sigma: tuple[float, float] = (0.05, 0.20)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def plan(h: int, w: int, grid_px: int, joint_fraction: float, rng: np.random.Generator, ranges: DegradeRanges = DegradeRanges()) -> DegradationPlan:
    """Assign each grid cell to A, B or both views and draw one degradation per cell.

    Exactly ``round(cells * joint_fraction)`` cells are degraded in both views;
    the rest split between A and B with counts differing by at most one.
    """
    if grid_px < 1 or h % grid_px or w % grid_px:
        raise IndivisibleGrid(f"{h}x{w} is not divisible into {grid_px}px cells")
    if not 0.0 <= joint_fraction <= 1.0:
        raise ValueError("joint_fraction must lie in [0, 1]")
    rows, cols = h // grid_px, w // grid_px
    total = rows * cols
    n_both = _round_half_up(total * joint_fraction)
    order = rng.permutation(total)
    rest = total - n_both
    n_a = rest // 2 + (int(rng.integers(2)) if rest % 2 else 0)
    flat = np.empty(total, dtype=np.int8)
    flat[order[:n_both]] = CellAssign.BOTH
    flat[order[n_both : n_both + n_a]] = CellAssign.A
    flat[order[n_both + n_a :]] = CellAssign.B
    kinds = list(Degradation)
    ops: list[list[CellOp]] = []
    for _ in range(rows):
        row = []
        for _ in range(cols):
            kind = kinds[int(rng.integers(len(kinds)))]
            if kind is Degradation.BLUR:
                row.append(CellOp(kind, float(rng.uniform(*ranges.blur_sigma))))
            elif kind is Degradation.GAUSS_NOISE:
                row.append(CellOp(kind, float(rng.uniform(*ranges.noise_sigma))))
            else:
                row.append(CellOp(kind))
        ops.append(row)
    return DegradationPlan(grid_px, flat.reshape(rows, cols), ops)


def degrade_cell(img: np.ndarray, rows: slice, cols: slice, op: CellOp, rng: np.random.Generator) -> np.ndarray:
    """Degraded copy of one rectangular cell; equals ``imaging.degrade`` restricted to the cell."""
    cell = img[rows, cols]
    if op.kind is Degradation.BLUR:
        r = int(math.ceil(3.0 * op.sigma))
        h, w = img.shape[:2]
        y0, y1 = max(rows.start - r, 0), min(rows.stop + r, h)
        x0, x1 = max(cols.start - r, 0), min(cols.stop + r, w)
        blurred = kernels.gaussian_blur(img[y0:y1, x0:x1], op.sigma)
        return blurred[rows.start - y0 : rows.stop - y0, cols.start - x0 : cols.stop - x0]
    if op.kind is Degradation.GAUSS_NOISE:
        if op.sigma == 0:
            return cell.copy()
        noise = rng.normal(0.0, op.sigma, size=(cell.shape[0] * cell.shape[1], 3))
        return np.clip(cell + noise.reshape(cell.shape), 0.0, 1.0)
    return rng.random((cell.shape[0] * cell.shape[1], 3)).reshape(cell.shape)


def synthesize_m3_pair(img, plan_: DegradationPlan, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Two complementary views of ``img`` and the untouched target.

    Each degradation reads the clean source, so neighbouring cells never
    bleed into each other.
    """
    img = imaging.as_image(img)
    if img.shape[:2] != plan_.shape:
        raise imaging.ShapeMismatch(f"image {img.shape[:2]} does not match plan {plan_.shape}")
    views = (img.copy(), img.copy())
    stream_a, stream_b = rng.spawn(2)
    streams = (stream_a, stream_b)
    rows, cols = plan_.cells.shape
    for r in range(rows):
        for c in range(cols):
            assign = plan_.cells[r, c]
            ys, xs = plan_.cell_slices(r, c)
            op = plan_.ops[r][c]
            for v in (0, 1):
                if assign == CellAssign.BOTH or assign == v:
                    views[v][ys, xs] = degrade_cell(img, ys, xs, op, streams[v])
    return views[0], views[1], img.copy()


# ---------------------------------------------------------------- targets and fusion pools


def build_target(kind: str, *, source=None, ir=None, vis=None, normal=None, pseudo_gt=None, subtag: str | None = None, label_mask=None, base=None) -> np.ndarray:
    """Supervision image for one task kind.

    ``kind`` is one of M3, IVIF, MEF, MFF, CONTROL, SEG. CONTROL and SEG
    operate on ``base`` (defaults to ``source``).
    """
    kind = kind.upper()

    def need(name, value):
        if value is None:
            raise MissingInput(f"{kind} target needs {name}")
        return value

    if kind == "M3":
        return imaging.as_image(need("source", source)).copy()
    if kind == "IVIF":
        return imaging.mean_fuse(need("ir", ir), need("vis", vis))
    if kind == "MEF":
        return imaging.as_image(need("normal", normal)).copy()
    if kind == "MFF":
        return imaging.as_image(need("pseudo_gt", pseudo_gt)).copy()
    base = base if base is not None else source
    if kind == "CONTROL":
        return imaging.adjust_photometric(need("base", base), need("subtag", subtag))
    if kind == "SEG":
        return imaging.overlay_mask(need("base", base), need("label_mask", label_mask))
    raise ValueError(f"unknown target kind {kind}")


def ivif_pair(img) -> tuple[np.ndarray, np.ndarray]:
    """Pseudo infrared (replicated luminance) and a dimmed visible view."""
    gray = imaging.to_gray(img)
    ir = np.repeat(gray[..., None], 3, axis=2)
    return ir, np.clip(imaging.as_image(img) * 0.6, 0.0, 1.0)


def mef_pair(img) -> tuple[np.ndarray, np.ndarray]:
    img = imaging.as_image(img)
    return np.clip(img * 0.5, 0.0, 1.0), np.clip(img * 2.0, 0.0, 1.0)


def mff_pair(img, sigma: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Near/far focus split: each view blurs one vertical half."""
    img = imaging.as_image(img)
    blurred = kernels.gaussian_blur(img, sigma)
    half = img.shape[1] // 2
    a, b = img.copy(), img.copy()
    a[:, half:] = blurred[:, half:]
    b[:, :half] = blurred[:, :half]
    return a, b


SEG_LABELS = ("bright regions", "dark regions")


def pseudo_label(img, label: str = "bright regions") -> np.ndarray:
    """Deterministic stand-in segmentation mask: pixels above/below mean luminance.

    A constant image falls back to a central square.
    """
    gray = imaging.to_gray(img)
    mask = gray > gray.mean() if label == "bright regions" else gray <= gray.mean()
    if mask.all() or not mask.any():
        h, w = gray.shape
        mask = np.zeros_like(mask)
        mask[h // 4 : h - h // 4, w // 4 : w - w // 4] = True
    return mask


# ---------------------------------------------------------------- records and manifests


INSTRUCTIONS = {
    "m3": ("Reconstruct a clean image from the two views.", "Fuse the images and remove the degradations."),
    "MULTI-MODALITIES": ("Fuse the infrared and visible images.",),
    "MULTI-EXPOSURE": ("Fuse the under- and over-exposed images.",),
    "MULTI-FOCUS": ("Fuse the images into an all-in-focus result.",),
    "LIGHT++": ("Fuse the images and strongly increase the brightness.",),
    "LIGHT+": ("Fuse the images and slightly increase the brightness.",),
    "LIGHT-": ("Fuse the images and slightly decrease the brightness.",),
    "LIGHT--": ("Fuse the images and strongly decrease the brightness.",),
    "CONTRAST+": ("Fuse the images and increase the contrast.",),
    "CONTRAST-": ("Fuse the images and reduce the contrast.",),
}

MANIFEST_FIELDS = ("id", "task_tag", "subtask_tag", "prompt", "path_a", "path_b", "path_target", "seed")


@dataclass
class SampleRecord:
    id: str
    task_tag: str | None
    subtask_tag: str | None
    prompt: str
    path_a: str
    path_b: str
    path_target: str
    seed: int

    @property
    def category(self) -> str:
        return category_of(self.task_tag, self.subtask_tag)

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "SampleRecord":
        obj = json.loads(line)
        if set(obj) != set(MANIFEST_FIELDS):
            raise ValueError(f"manifest row has fields {sorted(obj)}")
        return cls(**obj)


def category_of(task: str | None, subtask: str | None) -> str:
    if task == "SEG":
        return "seg"
    if task == "CONTROL":
        return "control"
    if task == "FUSION":
        return "m3" if subtask is None else "fusion"
    raise ValueError(f"no category for task {task!r}")


@dataclass
class Manifest:
    records: list[SampleRecord]
    # id -> pool item the record was drawn from; not serialised
    sources: dict[str, str] = field(default_factory=dict)

    @property
    def counts(self) -> dict[str, int]:
        out = {c: 0 for c in CATEGORIES}
        for r in self.records:
            out[r.category] += 1
        return out

    def __len__(self) -> int:
        return len(self.records)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for r in self.records:
                fh.write(r.to_json() + "\n")

    @classmethod
    def read(cls, path) -> "Manifest":
        with open(path, encoding="utf-8") as fh:
            return cls([SampleRecord.from_json(line) for line in fh if line.strip()])


def allocate_counts(weights: Mapping[str, float], total: int) -> dict[str, int]:
    """Largest-remainder apportionment of ``total`` by ``weights`` (ties go to the earlier key)."""
    keys = list(weights)
    w = np.asarray([weights[k] for k in keys], dtype=np.float64)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be non-negative and sum to 1")
    quotas = w * total
    counts = np.floor(quotas).astype(int)
    remainders = quotas - counts
    order = sorted(range(len(keys)), key=lambda i: (-remainders[i], i))
    for i in order[: total - int(counts.sum())]:
        counts[i] += 1
    return {k: int(c) for k, c in zip(keys, counts)}


def record_id(seed: int, category: str, k: int, item: str) -> str:
    return f"{imaging.derive_seed(seed, category, k, item):016x}"


def _recipe_choices(category: str, n: int, rng: np.random.Generator) -> list[tuple[str, str | None, str]]:
    """(task, subtask, instruction) for ``n`` records of one category."""
    if category == "m3":
        pick = rng.integers(len(INSTRUCTIONS["m3"]), size=n)
        return [("FUSION", None, INSTRUCTIONS["m3"][i]) for i in pick]
    if category == "fusion":
        subs = FUSION_SUBTASKS
        return [("FUSION", subs[i], INSTRUCTIONS[subs[i]][0]) for i in rng.integers(len(subs), size=n)]
    if category == "control":
        subs = P.TASK_SUBTAGS["CONTROL"]
        return [("CONTROL", subs[i], INSTRUCTIONS[subs[i]][0]) for i in rng.integers(len(subs), size=n)]
    if category == "seg":
        return [("SEG", None, f"Segment the {SEG_LABELS[i]}.") for i in rng.integers(len(SEG_LABELS), size=n)]
    raise ValueError(f"unknown category {category}")


def mix_manifest(category_pools: Mapping[str, Sequence[str]], weights: Mapping[str, float], total: int, seed: int) -> Manifest:
    """Draw ``total`` records with exact per-category counts, then shuffle deterministically.

    Pool items are opaque source keys (e.g. image names); a pool is cycled
    through in a seeded order when more records than items are needed.
    """
    counts = allocate_counts(weights, total)
    records: list[SampleRecord] = []
    sources: dict[str, str] = {}
    for cat, n in counts.items():
        if n == 0:
            continue
        pool = list(category_pools.get(cat, ()))
        if not pool:
            raise EmptyPool(f"category {cat} has weight but no pool items")
        perm = imaging.derive_rng(seed, "pool", cat).permutation(len(pool))
        rendered: dict[tuple, str] = {}
        for k, choice in enumerate(_recipe_choices(cat, n, imaging.derive_rng(seed, "recipe", cat))):
            item = pool[perm[k % len(pool)]]
            rid = record_id(seed, cat, k, item)
            if choice not in rendered:
                rendered[choice] = P.render_prompt(P.PromptAST(*choice))
            base = f"data/{cat}/{rid}"
            records.append(
                SampleRecord(
                    rid, choice[0], choice[1], rendered[choice],
                    f"{base}_a.png", f"{base}_b.png", f"{base}_target.png",
                    imaging.derive_seed(seed, rid),
                )
            )
            sources[rid] = item
    order = imaging.derive_rng(seed, "shuffle").permutation(len(records))
    return Manifest([records[i] for i in order], sources)


def valid_grids(h: int, w: int, grid_sizes: Sequence[int]) -> list[int]:
    return [g for g in grid_sizes if h % g == 0 and w % g == 0]


def synthesize_record(rec: SampleRecord, source, grid_sizes: Sequence[int] = (16, 32, 64), joint_fraction: float = 0.25, ranges: DegradeRanges = DegradeRanges()):
    """Inputs and target for one record; pure in (record, source).

    Returns ``(a, b, target, extra)`` where ``extra`` carries the label mask
    for segmentation records.
    """
    source = imaging.as_image(source)
    rng = np.random.default_rng(rec.seed)
    cat = rec.category
    extra: dict = {}
    if cat == "fusion":
        if rec.subtask_tag == "MULTI-MODALITIES":
            a, b = ivif_pair(source)
            return a, b, build_target("IVIF", ir=a, vis=b), extra
        if rec.subtask_tag == "MULTI-EXPOSURE":
            a, b = mef_pair(source)
            return a, b, build_target("MEF", normal=source), extra
        a, b = mff_pair(source)
        return a, b, build_target("MFF", pseudo_gt=source), extra
    grids = valid_grids(source.shape[0], source.shape[1], grid_sizes)
    if not grids:
        raise IndivisibleGrid(f"no grid size in {list(grid_sizes)} divides {source.shape[:2]}")
    grid = grids[int(rng.integers(len(grids)))]
    p = plan(source.shape[0], source.shape[1], grid, joint_fraction, rng, ranges)
    a, b, _ = synthesize_m3_pair(source, p, rng)
    if cat == "m3":
        return a, b, build_target("M3", source=source), extra
    if cat == "control":
        return a, b, build_target("CONTROL", base=source, subtag=rec.subtask_tag), extra
    label = next(lab for lab in SEG_LABELS if lab in rec.prompt)
    mask = pseudo_label(source, label)
    extra["label_mask"] = mask
    extra["label"] = label
    return a, b, build_target("SEG", base=source, label_mask=mask), extra


def write_sample(root: Path, rec: SampleRecord, a, b, target) -> None:
    imaging.save_png(a, root / rec.path_a)
    imaging.save_png(b, root / rec.path_b)
    imaging.save_png(target, root / rec.path_target)
