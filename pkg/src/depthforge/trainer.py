"""Multi-view training loop, checkpoints and reconstruction.

Each step takes B objects with ``v_in`` input views each, encodes every view,
averages the codes per object, regenerates ``v_out`` randomly chosen views per
object and minimizes the smoothed KL loss against the true maps there.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numcore as nc
from .camrig import N_VIEWS, build_rig
from .depthcodec import DepthMap, PointCloud, fuse, one_hot
from .io_store import read_depthmap, read_tensor_file, write_tensor_file
from .model import (
    ModelConfig,
    Params,
    average_groups,
    encode_onehot,
    generate_batch,
    init_params,
    kl_loss,
    predict_codes,
    smoothed_target,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 24
    v_in: int = 2
    v_out: int = 2
    iterations: int = 100_000
    lr: float = 4e-3
    beta1: float = 0.0
    beta2: float = 0.99
    bits: int = 8
    seed: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.v_in != self.v_out or not 1 <= self.v_in <= N_VIEWS:
            raise ValueError(f"need 1 <= v_in = v_out <= {N_VIEWS}, got v_in={self.v_in}, v_out={self.v_out}")
        if self.batch_size < 1 or self.batch_size * self.v_in < 2:
            raise ValueError("need batch_size * v_in >= 2")
        if self.iterations < 0 or self.checkpoint_every < 1:
            raise ValueError("iterations must be >= 0 and checkpoint_every >= 1")

    @classmethod
    def section_preset(cls, **kw) -> "TrainConfig":
        """Batch 32 variant of the defaults."""
        return cls(batch_size=32, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ObjectViews:
    """All 20 depth maps of one object, indexed by view id."""

    object_id: str
    class_id: int
    maps: list[DepthMap]
    _onehot: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if [m.view_id for m in self.maps] != list(range(len(self.maps))):
            raise ValueError(f"object {self.object_id!r}: maps must be ordered by view id 0..n-1")

    def onehot(self, view_id: int) -> np.ndarray:
        if view_id not in self._onehot:
            self._onehot[view_id] = one_hot(self.maps[view_id])
        return self._onehot[view_id]


def load_dataset(records, split: str | None = "train") -> list[ObjectViews]:
    out = []
    bits = None
    for rec in records:
        if split is not None and rec.split != split:
            continue
        maps = [read_depthmap(rec.paths[v]) for v in range(N_VIEWS)]
        for m in maps:
            if bits is None:
                bits = m.bits
            elif m.bits != bits:
                raise TrainingError(f"inconsistent bit depth in dataset: {m.bits} vs {bits} ({rec.object_id})")
        out.append(ObjectViews(rec.object_id, rec.class_id, maps))
    return out


def batch_loss(
    objects: list[ObjectViews],
    in_views: list[list[int]],
    out_views: list[list[int]],
    params: Params,
    mcfg: ModelConfig,
) -> nc.Tensor:
    """Loss for fixed input/output views; input views are taken in ascending order."""
    v_in = len(in_views[0])
    if any(len(v) != v_in for v in in_views):
        raise ValueError("every object must contribute the same number of input views")
    for obj, views in zip(objects, in_views):
        if len(set(views)) != len(views):
            raise ValueError(f"object {obj.object_id!r}: repeated input view ids {views}")
    x = np.stack([obj.onehot(v) for obj, views in zip(objects, in_views) for v in sorted(views)])
    z = encode_onehot(nc.Tensor(x), params, mcfg, group_size=v_in)
    zavg = average_groups(z, v_in)
    rows = np.repeat(np.arange(len(objects)), [len(v) for v in out_views])
    zrep = nc.ops.index_rows(zavg, rows)
    cls = [objects[r].class_id for r in rows]
    views = [v for vs in out_views for v in vs]
    logits = generate_batch(zrep, cls, views, params, mcfg)
    codes = np.stack([objects[r].maps[v].codes for r, v in zip(rows, views)])
    return kl_loss(smoothed_target(codes, mcfg.bits, mcfg.eps_smooth), logits)


def _zero_grads(params: Params) -> None:
    for p in params.values():
        p.grad = None


def train_step(
    objects: list[ObjectViews],
    in_views: list[list[int]],
    params: Params,
    opt: nc.AdamState,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    rng: np.random.Generator,
) -> float:
    """One optimization step; output views are drawn from ``rng`` per object."""
    out_views = [sorted(rng.choice(N_VIEWS, size=tcfg.v_out, replace=False).tolist()) for _ in objects]
    _zero_grads(params)
    loss = batch_loss(objects, in_views, out_views, params, mcfg)
    val = loss.item()
    if not np.isfinite(val):
        raise TrainingError(
            f"non-finite loss {val} at step {opt.step_count + 1}; objects "
            f"{[o.object_id for o in objects]}, out views {out_views}"
        )
    loss.backward()
    nc.adam_step(params, opt)
    _zero_grads(params)
    return val


def sample_batch(dataset: list[ObjectViews], tcfg: TrainConfig, rng: np.random.Generator):
    n = len(dataset)
    idx = rng.choice(n, size=tcfg.batch_size, replace=n < tcfg.batch_size)
    objs = [dataset[i] for i in idx]
    ins = [sorted(rng.choice(N_VIEWS, size=tcfg.v_in, replace=False).tolist()) for _ in objs]
    return objs, ins


def new_optimizer(tcfg: TrainConfig) -> nc.AdamState:
    return nc.AdamState(lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2)


# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: Params
    opt: nc.AdamState
    iteration: int
    rng_state: dict
    class_names: list[str] = field(default_factory=list)
    projection: str = "orthographic"

    def save(self, path) -> None:
        tensors = {f"param/{k}": p.data for k, p in self.params.items()}
        for k, m in self.opt.m.items():
            tensors[f"adam.m/{k}"] = m
            tensors[f"adam.v/{k}"] = self.opt.v[k]
        meta = {
            "kind": "depthforge-model",
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "iteration": self.iteration,
            "rng_state": self.rng_state,
            "adam": {"step_count": self.opt.step_count, "lr": self.opt.lr, "beta1": self.opt.beta1,
                     "beta2": self.opt.beta2, "eps": self.opt.eps},
            "class_names": self.class_names,
            "projection": self.projection,
        }
        write_tensor_file(path, meta, tensors)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        meta, tensors = read_tensor_file(path)
        if meta.get("kind") != "depthforge-model":
            raise TrainingError(f"{path}: not a model checkpoint")
        mcfg = ModelConfig(**meta["model_config"])
        tcfg = TrainConfig(**meta["train_config"])
        params = {k[len("param/"):]: nc.Tensor(v, requires_grad=True, name=k[len("param/"):])
                  for k, v in tensors.items() if k.startswith("param/")}
        a = meta["adam"]
        opt = nc.AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step_count=a["step_count"])
        for k, v in tensors.items():
            if k.startswith("adam.m/"):
                opt.m[k[len("adam.m/"):]] = v
            elif k.startswith("adam.v/"):
                opt.v[k[len("adam.v/"):]] = v
        return cls(mcfg, tcfg, params, opt, meta["iteration"], meta["rng_state"], meta.get("class_names", []),
                   meta.get("projection", "orthographic"))


@dataclass
class TrainResult:
    params: Params
    losses: list[float]
    checkpoints: list[Path]
    opt: nc.AdamState


def run_training(
    dataset: list[ObjectViews],
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    out_dir=None,
    resume=None,
    class_names: list[str] | None = None,
    stop_after: int | None = None,
    progress=None,
) -> TrainResult:
    """Train from scratch (or from checkpoint ``resume``) up to ``tcfg.iterations``.

    Writes ``loss.csv`` and ``ckpt_XXXXXXX.dfck`` files to ``out_dir`` when it is
    given. ``stop_after`` halts early after that absolute iteration, as if
    interrupted.
    """
    if len(dataset) < 2:
        raise TrainingError("training needs at least 2 objects")
    bits = {m.bits for o in dataset for m in o.maps}
    if len(bits) != 1:
        raise TrainingError(f"inconsistent bit depth in dataset: {sorted(bits)}")
    if bits != {mcfg.bits}:
        raise TrainingError(f"dataset has {bits.pop()} bits, model expects {mcfg.bits}")
    max_cls = max(o.class_id for o in dataset)
    if max_cls >= mcfg.n_classes:
        raise TrainingError(f"class id {max_cls} exceeds model n_classes={mcfg.n_classes}")
    projection = dataset[0].maps[0].projection

    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else Checkpoint.load(resume)
        params, opt, start = ck.params, ck.opt, ck.iteration
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.rng_state
    else:
        params = init_params(mcfg, seed=tcfg.seed)
        opt = new_optimizer(tcfg)
        start = 0
        rng = np.random.default_rng(tcfg.seed)

    out = Path(out_dir) if out_dir is not None else None
    log_rows: list[list] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "loss.csv"
        if start and csv_path.exists():
            with open(csv_path, newline="") as fh:
                log_rows = [r for r in csv.reader(fh)][1:]
            log_rows = [r for r in log_rows if int(r[0]) <= start]
    losses = [float(r[1]) for r in log_rows]
    ckpts: list[Path] = []
    end = tcfg.iterations if stop_after is None else min(tcfg.iterations, stop_after)

    def save(it: int) -> None:
        if out is None:
            return
        ck = Checkpoint(mcfg, tcfg, params, opt, it, rng.bit_generator.state, class_names or [], projection)
        path = out / f"ckpt_{it:07d}.dfck"
        ck.save(path)
        ckpts.append(path)
        with open(out / "loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss"])
            w.writerows(log_rows)

    for it in range(start + 1, end + 1):
        objs, ins = sample_batch(dataset, tcfg, rng)
        val = train_step(objs, ins, params, opt, mcfg, tcfg, rng)
        losses.append(val)
        log_rows.append([it, repr(val)])
        if progress is not None:
            progress(it, val)
        if it % tcfg.checkpoint_every == 0 or it == end:
            save(it)
    return TrainResult(params, losses, ckpts, opt)


# inference


def reconstruct(
    maps: list[DepthMap],
    class_id: int,
    params: Params,
    mcfg: ModelConfig,
    z: np.ndarray | None = None,
) -> tuple[list[DepthMap], PointCloud]:
    """Encode and average ``maps`` (or use ``z``), regenerate all 20 views and fuse them.

    A single input map is single-view reconstruction.
    """
    if not 0 <= class_id < mcfg.n_classes:
        raise IndexError(f"class_id {class_id} out of range [0, {mcfg.n_classes})")
    if z is None:
        if not maps:
            raise ValueError("reconstruct needs at least one input map")
        z = identity_of(maps, params, mcfg)
    ref = maps[0] if maps else None
    near = ref.near if ref else 2.0
    far = ref.far if ref else 3.0
    projection = ref.projection if ref else "orthographic"
    return decode_views(z, class_id, params, mcfg, near, far, projection)


def identity_of(maps: list[DepthMap], params: Params, mcfg: ModelConfig) -> np.ndarray:
    maps = sorted(maps, key=lambda m: m.view_id)
    for m in maps:
        if m.bits != mcfg.bits or m.resolution != mcfg.resolution:
            raise ValueError(f"input map ({m.resolution}px, {m.bits} bits) does not match the model")
    x = nc.Tensor(np.stack([one_hot(m) for m in maps]))
    z = encode_onehot(x, params, mcfg, group_size=len(maps))
    return average_groups(z, len(maps)).data[0]


def decode_views(z, class_id, params, mcfg, near=2.0, far=3.0, projection="orthographic"):
    zt = nc.Tensor(np.repeat(np.asarray(z, dtype=np.float64).reshape(1, -1), N_VIEWS, axis=0))
    logits = generate_batch(zt, [class_id] * N_VIEWS, list(range(N_VIEWS)), params, mcfg).data
    codes = predict_codes(logits)
    out = [DepthMap(codes[v], mcfg.bits, near, far, v, projection) for v in range(N_VIEWS)]
    rig = build_rig(mcfg.resolution, projection)
    return out, fuse([(m, rig[m.view_id]) for m in out])


def code_accuracy(pred: list[DepthMap], truth: list[DepthMap]) -> np.ndarray:
    """Fraction of pixels with the exact code, per view."""
    return np.array([np.mean(p.codes == t.codes) for p, t in zip(pred, truth)])


def model_from_checkpoint(path) -> Checkpoint:
    return Checkpoint.load(path)


def override(tcfg: TrainConfig, **kw) -> TrainConfig:
    return replace(tcfg, **{k: v for k, v in kw.items() if v is not None})
