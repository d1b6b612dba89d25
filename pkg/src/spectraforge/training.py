"""Manifests, batch assembly, the two-stage training loop and evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .augment import RANGES, AffineParams, augment_pair, sample_affine
from .hypercube import SpectralCube, ValidityMask, load_cube, load_mask_png
from .spectral import ProjectionMatrix, class_stats, project_cube, spectral_angle_array
from .spotmask import inpaint_spectral, spot_mask
from .tensornet import (
    MAIN_WEIGHTS,
    PRETRAIN_WEIGHTS,
    Adam,
    AsymmetricUNet,
    Checkpoint,
    LossWeights,
    NetworkConfig,
    NonFiniteError,
    Tensor,
    composite_loss,
    load_checkpoint,
    no_grad,
    save_checkpoint,
)
from .tensornet.tensor import resize_matrix

log = logging.getLogger(__name__)

# 85 train / 10 test out of 95
DEFAULT_TEST_FRACTION = 10 / 95
PROJECTED = "projected"
RAW = "raw"


class TrainingError(RuntimeError):
    pass


class ManifestError(ValueError):
    pass


def default_test_count(n: int) -> int:
    return min(n - 1, int(round(n * DEFAULT_TEST_FRACTION))) if n > 1 else 0


def split_dataset(ids, seed: int, test_count: int | None = None) -> tuple[list[str], list[str]]:
    """Uniform random split; both lists keep the input order.

    Spatially adjacent samples may overlap across the split; nothing here
    checks for that.
    """
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ManifestError("sample ids must be unique")
    if test_count is None:
        test_count = default_test_count(len(ids))
    if not 0 <= test_count < len(ids):
        raise ManifestError(f"test_count {test_count} must be in [0, {len(ids)})")
    perm = np.random.default_rng(seed).permutation(len(ids))
    test_idx = set(perm[:test_count].tolist())
    train = [s for i, s in enumerate(ids) if i not in test_idx]
    test = [s for i, s in enumerate(ids) if i in test_idx]
    return train, test


@dataclass
class SampleRecord:
    id: str
    input_path: str | None
    gt_path: str
    seg_path: str | None = None


@dataclass
class DatasetManifest:
    samples: list[SampleRecord]
    train: list[str]
    test: list[str]
    seed: int = 0
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate sample ids")
        if set(self.train) & set(self.test):
            raise ManifestError("train and test splits overlap")
        if set(self.train) | set(self.test) != set(ids) or len(self.train) + len(self.test) != len(ids):
            raise ManifestError("train and test must partition the sample ids")

    def record(self, sid: str) -> SampleRecord:
        for s in self.samples:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def resolve(self, rel: str | None) -> Path | None:
        return None if rel is None else self.root / rel

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "samples": [asdict(s) for s in self.samples],
            "split": {"train": list(self.train), "test": list(self.test),
                      "train_count": len(self.train), "test_count": len(self.test)},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
            samples = [SampleRecord(**s) for s in d["samples"]]
            split = d["split"]
            return cls(samples, list(split["train"]), list(split["test"]), int(d.get("seed", 0)), path.parent)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ManifestError(f"{path}: malformed manifest ({exc})") from exc


@dataclass
class LoadedSample:
    id: str
    input: SpectralCube | None
    ground_truth: SpectralCube
    segmentation: np.ndarray | None = None
    spot_free: bool = False


def inpaint_inputs(data: dict[str, LoadedSample]) -> dict[str, LoadedSample]:
    """Mask and inpaint LED spots in every raw input once, ahead of batching."""
    out = {}
    for k, s in data.items():
        if s.input is not None and not s.spot_free:
            s = replace(s, input=inpaint_spectral(s.input, spot_mask(s.input)), spot_free=True)
        out[k] = s
    return out


def load_samples(manifest: DatasetManifest, ids=None) -> dict[str, LoadedSample]:
    ids = [s.id for s in manifest.samples] if ids is None else list(ids)
    out = {}
    for sid in ids:
        rec = manifest.record(sid)
        inp = load_cube(manifest.resolve(rec.input_path)) if rec.input_path else None
        gt = load_cube(manifest.resolve(rec.gt_path))
        seg = load_mask_png(manifest.resolve(rec.seg_path)).bits[0] if rec.seg_path else None
        out[sid] = LoadedSample(sid, inp, gt, seg)
    return out


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    epochs: int = 1000
    batch_size: int = 5
    weights: LossWeights = PRETRAIN_WEIGHTS
    projected_per_batch: int = 5
    raw_per_batch: int = 0
    augment: bool = True
    ranges: dict = field(default_factory=lambda: dict(RANGES))
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    smooth_l1_beta: float = 1.0
    delta_vs_gt: bool = False
    inpaint_raw: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.ranges = {k: tuple(v) for k, v in self.ranges.items()}
        self.validate()

    def validate(self) -> None:
        if self.stage not in ("pretrain", "main"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.projected_per_batch < 0 or self.raw_per_batch < 0:
            raise ValueError("batch composition counts must be non-negative")
        if self.projected_per_batch + self.raw_per_batch != self.batch_size:
            raise ValueError("projected_per_batch + raw_per_batch must equal batch_size")
        if self.stage == "pretrain" and self.raw_per_batch:
            raise ValueError("pretrain batches are all projected")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if set(self.ranges) != set(RANGES):
            raise ValueError(f"augmentation ranges need keys {sorted(RANGES)}")

    @classmethod
    def pretrain(cls, **kw) -> "TrainConfig":
        base = dict(stage="pretrain", weights=PRETRAIN_WEIGHTS, projected_per_batch=5, raw_per_batch=0, lr=1e-3)
        base.update(kw)
        return cls(**base)

    @classmethod
    def main(cls, **kw) -> "TrainConfig":
        base = dict(stage="main", weights=MAIN_WEIGHTS, projected_per_batch=3, raw_per_batch=2, lr=1e-4)
        base.update(kw)
        return cls(**base)

    @classmethod
    def for_stage(cls, stage: str, **kw) -> "TrainConfig":
        if stage == "pretrain":
            return cls.pretrain(**kw)
        if stage == "main":
            return cls.main(**kw)
        raise ValueError(f"unknown stage {stage!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        d["ranges"] = {k: list(v) for k, v in self.ranges.items()}
        return d


@dataclass
class BatchItem:
    id: str
    source: str  # PROJECTED or RAW
    input: np.ndarray  # (C, H, W)
    ground_truth: np.ndarray  # (B, h, w)
    mask: np.ndarray  # (1, h, w)
    params: AffineParams | None = None


@dataclass
class Batch:
    items: list[BatchItem]

    @property
    def sources(self) -> list[str]:
        return [it.source for it in self.items]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = np.stack([it.input for it in self.items]).astype(np.float32)
        y = np.stack([it.ground_truth for it in self.items]).astype(np.float32)
        m = np.stack([it.mask for it in self.items])
        return x, y, m


def upsample_cube(cube: SpectralCube, height: int, width: int) -> SpectralCube:
    """Bilinear (half-pixel centers) resize; constants stay constant."""
    ry = resize_matrix(cube.height, height)
    rx = resize_matrix(cube.width, width)
    out = ry @ cube.data.astype(np.float64) @ rx.T
    if not cube.raw:
        out = np.clip(out, 0.0, 1.0)
    return cube.replace(data=out.astype(np.float32))


def projected_input(gt: SpectralCube, proj: ProjectionMatrix, input_hw) -> SpectralCube:
    """Simulate a camera frame from ground truth: project to LED bands, then resize up."""
    return upsample_cube(project_cube(gt, proj), int(input_hw[0]), int(input_hw[1]))


def _make_item(sample: LoadedSample, source: str, proj: ProjectionMatrix, input_hw,
               rng: np.random.Generator, cfg: TrainConfig) -> BatchItem:
    gt = sample.ground_truth
    if source == PROJECTED:
        inp = projected_input(gt, proj, input_hw)
    else:
        if sample.input is None:
            raise TrainingError(f"sample {sample.id} has no raw camera input")
        inp = sample.input
        if cfg.inpaint_raw and not sample.spot_free:
            inp = inpaint_spectral(inp, spot_mask(inp))
    params = sample_affine(rng, cfg.ranges) if cfg.augment else None
    if params is not None:
        inp, gt, mask = augment_pair(inp, gt, params=params)
        mbits = mask.bits
    else:
        mbits = np.ones((1, gt.height, gt.width), dtype=bool)
    return BatchItem(sample.id, source, inp.data, gt.data, mbits, params)


def _draw_ids(ids, rng, n):
    ids = list(ids)
    if not ids:
        raise TrainingError("no training samples")
    idx = rng.choice(len(ids), size=n, replace=n > len(ids))
    return [ids[i] for i in idx]


def make_pretrain_batch(data: dict[str, LoadedSample], proj: ProjectionMatrix, rng: np.random.Generator,
                        cfg: TrainConfig, input_hw, ids=None) -> Batch:
    """Every item is projected ground truth, resized to the input dims and augmented."""
    if ids is None:
        ids = _draw_ids(data, rng, cfg.batch_size)
    return Batch([_make_item(data[i], PROJECTED, proj, input_hw, rng, cfg) for i in ids])


def make_main_batch(data: dict[str, LoadedSample], proj: ProjectionMatrix, rng: np.random.Generator,
                    cfg: TrainConfig, input_hw, ids=None) -> Batch:
    """Exactly ``projected_per_batch`` projected and ``raw_per_batch`` raw items, shuffled."""
    if ids is None:
        ids = _draw_ids(data, rng, cfg.batch_size)
    if len(ids) != cfg.projected_per_batch + cfg.raw_per_batch:
        raise TrainingError("batch id count does not match the configured composition")
    if cfg.raw_per_batch and any(data[i].input is None for i in data):
        raise TrainingError("main stage needs raw camera inputs for every sample")
    roles = [PROJECTED] * cfg.projected_per_batch + [RAW] * cfg.raw_per_batch
    roles = [roles[k] for k in rng.permutation(len(roles))]
    return Batch([_make_item(data[i], r, proj, input_hw, rng, cfg) for i, r in zip(ids, roles)])


def make_batch(data, proj, rng, cfg: TrainConfig, input_hw, ids=None) -> Batch:
    fn = make_pretrain_batch if cfg.stage == "pretrain" else make_main_batch
    return fn(data, proj, rng, cfg, input_hw, ids)


def epoch_batches(ids, batch_size: int, rng: np.random.Generator) -> list[list[str]]:
    """ceil(n / batch_size) batches from a fresh permutation; the last wraps to the start."""
    ids = list(ids)
    n = len(ids)
    perm = [ids[i] for i in rng.permutation(n)]
    out = []
    for k in range(math.ceil(n / batch_size)):
        out.append([perm[(k * batch_size + j) % n] for j in range(batch_size)])
    return out


@dataclass
class TrainResult:
    model: AsymmetricUNet
    history: list[float]
    epochs_run: int
    steps: int
    seconds: float


def _checkpoint(model, opt, cfg, rng, history, epoch, step) -> Checkpoint:
    return Checkpoint(
        config={"network": model.cfg.to_dict(), "train": cfg.to_dict()},
        params={k: p.data for k, p in model.params.items()},
        m=dict(zip(model.params, opt.state.m)),
        v=dict(zip(model.params, opt.state.v)),
        step=step, epoch=epoch, adam_t=opt.state.t,
        rng_state=rng.bit_generator.state, history=list(history),
    )


def restore(model: AsymmetricUNet, ck: Checkpoint, opt: Adam | None = None, rng: np.random.Generator | None = None):
    model.load_state(ck.params)
    if opt is not None:
        names = list(model.params)
        opt.params = model.parameters()
        opt.state.m = [ck.m[n].copy() for n in names]
        opt.state.v = [ck.v[n].copy() for n in names]
        opt.state.t = ck.adam_t
    if rng is not None and ck.rng_state is not None:
        rng.bit_generator.state = ck.rng_state


def train_stage(model: AsymmetricUNet, data: dict[str, LoadedSample], train_ids, cfg: TrainConfig,
                proj: ProjectionMatrix, out_dir=None, resume=None) -> TrainResult:
    """Run ``cfg.epochs`` epochs, logging the mean loss of each.

    With ``out_dir`` and ``cfg.checkpoint_every`` a checkpoint is written
    every that many epochs and at the end. ``resume`` (path or
    :class:`Checkpoint`) restores parameters, optimizer moments, the rng
    and the loss history, so the run continues exactly where it stopped.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    history: list[float] = []
    start, step = 0, 0
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        restore(model, ck, opt, rng)
        history = [float(v) for v in ck.history]
        start, step = ck.epoch, ck.step
    input_hw = model.cfg.input[:2]
    if cfg.inpaint_raw and cfg.stage == "main":
        data = inpaint_inputs({k: data[k] for k in dict.fromkeys(train_ids)})
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    for epoch in range(start, cfg.epochs):
        losses = []
        for ids in epoch_batches(train_ids, cfg.batch_size, rng):
            batch = make_batch(data, proj, rng, cfg, input_hw, ids)
            x, y, m = batch.arrays()
            model.zero_grad()
            try:
                pred = model(Tensor(x))
                loss, parts = composite_loss(pred, y, m, cfg.weights, cfg.smooth_l1_beta, cfg.delta_vs_gt)
                if not math.isfinite(loss.item()):
                    raise NonFiniteError("loss is not finite")
                loss.backward()
                for name, p in model.params.items():
                    if p.grad is not None and not np.all(np.isfinite(p.grad)):
                        raise NonFiniteError(f"gradient of {name} is not finite")
            except NonFiniteError as exc:
                raise TrainingError(
                    f"non-finite values at epoch {epoch} step {step} (batch {ids}): {exc}"
                ) from exc
            opt.step()
            step += 1
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        log.info("%s epoch %d loss %.6f", cfg.stage, epoch + 1, history[-1])
        done = epoch + 1
        if out_dir is not None and (
            (cfg.checkpoint_every and done % cfg.checkpoint_every == 0) or done == cfg.epochs
        ):
            save_checkpoint(out_dir / f"{cfg.stage}_epoch{done:05d}.ck",
                            _checkpoint(model, opt, cfg, rng, history, done, step))
    if out_dir is not None:
        (out_dir / f"{cfg.stage}_history.json").write_text(json.dumps(history) + "\n")
    return TrainResult(model, history, max(0, cfg.epochs - start), step, time.perf_counter() - t0)


def predict(model: AsymmetricUNet, inputs: list[SpectralCube], wavelengths, batch: int = 8) -> list[SpectralCube]:
    out = []
    with no_grad():
        for k in range(0, len(inputs), batch):
            x = np.stack([c.data for c in inputs[k:k + batch]])
            y = model(Tensor(x)).data
            out.extend(SpectralCube(np.clip(yi, 0.0, 1.0), wavelengths) for yi in y)
    return out


def sample_metrics(gt: np.ndarray, pred: np.ndarray, segmentation=None, sid: str = "") -> dict:
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch {gt.shape} vs {pred.shape}")
    d = pred - gt
    angle = spectral_angle_array(gt, pred, axis=0)
    row = {"id": sid, "mae": float(np.abs(d).mean()), "mse": float((d * d).mean()), "angle": float(angle.mean())}
    if segmentation is not None:
        stats = class_stats(angle, segmentation)
        row["root"] = stats["root"].as_dict()
        row["soil"] = stats["soil"].as_dict()
    return row


def summarize(rows: list[dict]) -> dict:
    return {k: float(np.mean([r[k] for r in rows])) for k in ("mae", "mse", "angle")}


def evaluate(model: AsymmetricUNet, data: dict[str, LoadedSample], ids, proj: ProjectionMatrix | None = None,
             source: str = RAW) -> dict:
    """Per-sample MAE, MSE and mean normalized spectral angle.

    ``source`` picks the network input: the raw camera cube or, with
    ``proj``, the projected ground truth.
    """
    ids = list(ids)
    if not ids:
        raise TrainingError("evaluation split is empty")
    h, w = model.cfg.input[:2]
    inputs = []
    for sid in ids:
        s = data[sid]
        if source == RAW:
            if s.input is None:
                raise TrainingError(f"sample {sid} has no raw input")
            inputs.append(s.input)
        else:
            inputs.append(projected_input(s.ground_truth, proj, (h, w)))
    wl = data[ids[0]].ground_truth.wavelengths
    preds = predict(model, inputs, wl)
    rows = [sample_metrics(data[sid].ground_truth.data, p.data, data[sid].segmentation, sid)
            for sid, p in zip(ids, preds)]
    return {"samples": rows, "summary": summarize(rows)}
