"""``depthforge`` command line.

Every command takes ``--seed`` and ``--config FILE.json``. A value given as a
flag wins over the config file, which wins over the built-in default. The
resolved configuration is printed to stderr as one JSON line before the
command runs. Exit status: 0 success, 1 runtime failure, 2 usage error; on
failure one JSON line ``{"error": ..., "message": ...}`` goes to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .camrig import N_VIEWS, build_rig, canonical_projection
from .depthcodec import DepthMap, PointCloud, backproject_image, half_bin, quantize
from .imle import ImleConfig, ImleModel, imle_fit, sample_identity, slerp
from .io_store import (
    append_manifest,
    export_embeddings,
    load_manifest,
    load_mesh,
    read_depthmap,
    read_pointcloud_ply,
    write_depthmap,
    write_identity_bank,
    write_pointcloud_ply,
)
from .io_store import class_names as manifest_class_names
from .metrics import CD_SAMPLES, EMD_SAMPLES, evaluate_set
from .model import ModelConfig
from .rasterizer import normalize_mesh, render_views
from .shapes import box, icosphere
from .trainer import (
    Checkpoint,
    ObjectViews,
    TrainConfig,
    decode_views,
    identity_of,
    load_dataset,
    reconstruct,
    run_training,
)

log = logging.getLogger("depthforge")

_DEFAULT_TRAIN = TrainConfig()
_DEFAULT_MODEL = ModelConfig()
_DEFAULT_IMLE = ImleConfig()


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class Opt:
    flag: str
    type: object
    default: object
    help: str
    choices: tuple | None = None

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


_PROJ_CHOICES = ("ortho", "persp", "orthographic", "perspective")

COMMON = [Opt("--seed", int, 0, "random seed")]

COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "rig-info": ("print the 20-view camera rig", [
        Opt("--res", int, 64, "resolution in pixels"),
        Opt("--projection", str, "ortho", "projection", _PROJ_CHOICES),
    ]),
    "render": ("render a mesh into 20 quantized depth maps", [
        Opt("--mesh", str, None, "OBJ or OFF mesh (required)"),
        Opt("--out", str, None, "output directory (required)"),
        Opt("--res", int, 64, "resolution in pixels"),
        Opt("--bits", int, 8, "depth precision in bits"),
        Opt("--projection", str, "ortho", "projection", _PROJ_CHOICES),
        Opt("--object-id", str, None, "object id (default: mesh file stem)"),
        Opt("--class-id", int, 0, "class id"),
        Opt("--class-name", str, "object", "class name"),
        Opt("--split", str, "train", "dataset split", ("train", "val", "test")),
        Opt("--manifest", str, None, "manifest to append to (default: OUT/manifest.csv)"),
        Opt("--gt-ply", str, None, "also write the unquantized back-projected cloud here"),
    ]),
    "train": ("train encoder and generator", [
        Opt("--manifest", str, None, "dataset manifest (required)"),
        Opt("--out", str, None, "output directory (required)"),
        Opt("--class-conditional", bool, False, "condition the generator on class"),
        Opt("--batch", int, _DEFAULT_TRAIN.batch_size, "objects per batch"),
        Opt("--vin", int, _DEFAULT_TRAIN.v_in, "input (and output) views per object"),
        Opt("--iters", int, _DEFAULT_TRAIN.iterations, "training iterations"),
        Opt("--lr", float, _DEFAULT_TRAIN.lr, "Adam learning rate"),
        Opt("--beta1", float, _DEFAULT_TRAIN.beta1, "Adam beta1"),
        Opt("--beta2", float, _DEFAULT_TRAIN.beta2, "Adam beta2"),
        Opt("--latent", int, _DEFAULT_MODEL.latent_dim, "identity code width"),
        Opt("--channels", int, _DEFAULT_MODEL.base_channels, "base channel count"),
        Opt("--checkpoint-every", int, _DEFAULT_TRAIN.checkpoint_every, "iterations between checkpoints"),
        Opt("--resume", str, None, "checkpoint to resume from"),
    ]),
    "reconstruct": ("reconstruct 20 views and a fused cloud from input depth maps", [
        Opt("--checkpoint", str, None, "model checkpoint (required)"),
        Opt("--input", str, None, "comma-separated depth map files (required)"),
        Opt("--class", str, "0", "class id or name"),
        Opt("--out", str, None, "output directory (required)"),
        Opt("--name", str, "reconstruction", "stem of the output PLY"),
    ]),
    "eval": ("compare predicted and ground-truth PLY clouds", [
        Opt("--pred", str, None, "directory of predicted .ply files (required)"),
        Opt("--gt", str, None, "directory of ground-truth .ply files (required)"),
        Opt("--cd-samples", int, CD_SAMPLES, "points per cloud for Chamfer"),
        Opt("--emd-samples", int, EMD_SAMPLES, "points per cloud for EMD"),
        Opt("--csv", str, None, "also write per-shape metrics here"),
    ]),
    "imle-train": ("fit an IMLE sampler on training identity codes", [
        Opt("--checkpoint", str, None, "model checkpoint (required)"),
        Opt("--manifest", str, None, "dataset manifest (required)"),
        Opt("--out", str, None, "output directory (required)"),
        Opt("--class", str, None, "restrict to one class id or name (default: one sampler per class)"),
        Opt("--epochs", int, _DEFAULT_IMLE.epochs, "IMLE epochs"),
        Opt("--imle-batch", int, _DEFAULT_IMLE.batch_size, "codes per IMLE minibatch"),
        Opt("--imle-lr", float, _DEFAULT_IMLE.lr, "IMLE learning rate"),
        Opt("--noise-dim", int, _DEFAULT_IMLE.noise_dim, "noise width"),
        Opt("--hidden", int, _DEFAULT_IMLE.hidden, "hidden units per layer"),
        Opt("--oversample", int, _DEFAULT_IMLE.oversample, "bank size as a multiple of the code count"),
    ]),
    "sample": ("draw novel shapes from an IMLE sampler", [
        Opt("--imle", str, None, "IMLE model file (required)"),
        Opt("--checkpoint", str, None, "model checkpoint (default: the one the sampler was fitted on)"),
        Opt("--n", int, 1, "number of samples"),
        Opt("--class", str, None, "class id or name (default: the sampler's class)"),
        Opt("--out", str, None, "output directory (required)"),
    ]),
    "interpolate": ("slerp between two objects' identity codes", [
        Opt("--checkpoint", str, None, "model checkpoint (required)"),
        Opt("--a", str, None, "first object: manifest object id, or comma-separated depth maps (required)"),
        Opt("--b", str, None, "second object, same forms as --a (required)"),
        Opt("--manifest", str, None, "manifest used to resolve object ids"),
        Opt("--class", str, None, "class id or name (default: class of --a, else 0)"),
        Opt("--steps", int, 10, "number of interpolation points including both ends"),
        Opt("--out", str, None, "output directory (required)"),
    ]),
    "export-embeddings": ("write the learned class embedding table as CSV", [
        Opt("--checkpoint", str, None, "model checkpoint (required)"),
        Opt("--out", str, None, "CSV path (required)"),
    ]),
    "ablate": ("sweep one configuration axis on the built-in toy set", [
        Opt("--axis", str, None, "axis to sweep (required)", ("bits", "vin", "projection")),
        Opt("--values", str, None, "comma-separated values (default: 5,6,7,8 / 1,2,3,4 / ortho,persp)"),
        Opt("--out", str, None, "CSV path (required)"),
        Opt("--res", int, 16, "toy resolution"),
        Opt("--bits", int, 8, "bits when not the swept axis"),
        Opt("--vin", int, 2, "views per object when not the swept axis"),
        Opt("--batch", int, 2, "batch size at vin=2; scaled to keep batch*vin fixed on the vin axis"),
        Opt("--projection", str, "ortho", "projection when not the swept axis", _PROJ_CHOICES),
        Opt("--iters", int, 200, "training iterations per run"),
        Opt("--lr", float, _DEFAULT_TRAIN.lr, "Adam learning rate"),
        Opt("--latent", int, 32, "identity code width"),
        Opt("--channels", int, 8, "base channel count"),
        Opt("--cd-samples", int, 2000, "points per cloud for Chamfer"),
        Opt("--emd-samples", int, 200, "points per cloud for EMD"),
        Opt("--svr-view", int, 0, "input view for single-view reconstruction"),
    ]),
}

REQUIRED = {
    "render": ("mesh", "out"),
    "train": ("manifest", "out"),
    "reconstruct": ("checkpoint", "input", "out"),
    "eval": ("pred", "gt"),
    "imle-train": ("checkpoint", "manifest", "out"),
    "sample": ("imle", "out"),
    "interpolate": ("checkpoint", "a", "b", "out"),
    "export-embeddings": ("checkpoint", "out"),
    "ablate": ("axis", "out"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("UsageError", message)
        raise SystemExit(2)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="depthforge", description="Multi-view depth-map shape reconstruction.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, (text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        for o in COMMON + opts:
            shown = "unset" if o.default is None else o.default
            if o.type is bool:
                p.add_argument(o.flag, action="store_const", const=True, default=None,
                               help=f"{o.help} (default: {shown})")
            else:
                p.add_argument(o.flag, type=o.type, default=None, choices=o.choices,
                               help=f"{o.help} (default: {shown})")
        p.add_argument("--config", default=None, help="JSON file of option values (flags override it)")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Merge flag > config file > default into one dict keyed by option dest."""
    opts = COMMON + COMMANDS[command][1]
    file_cfg = {}
    if ns.config:
        try:
            file_cfg = json.loads(Path(ns.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {ns.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError(f"config {ns.config} must hold a JSON object")
        known = {o.dest for o in opts}
        unknown = sorted(set(file_cfg) - known)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    cfg = {}
    for o in opts:
        val = getattr(ns, o.dest)
        if val is None:
            val = file_cfg.get(o.dest, o.default)
            if val is not None and o.type is not bool:
                try:
                    val = o.type(val)
                except (TypeError, ValueError) as exc:
                    raise UsageError(f"config value for {o.dest}: {exc}") from exc
            if o.choices and val is not None and val not in o.choices:
                raise UsageError(f"config value {val!r} for {o.dest} not in {list(o.choices)}")
        cfg[o.dest] = val
    missing = [k for k in REQUIRED.get(command, ()) if cfg.get(k) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return cfg


# helpers


def _class_id(value, names: list[str]) -> int:
    if value is None:
        return 0
    if str(value).lstrip("-").isdigit():
        return int(value)
    if value in names:
        return names.index(value)
    raise ValueError(f"unknown class {value!r}; known: {names}")


def _write_views(maps: list[DepthMap], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for m in maps:
        write_depthmap(m, out / f"view_{m.view_id:02d}.dfdm")


def _progress(every: int):
    t0 = time.perf_counter()

    def cb(it, val):
        if it % every == 0:
            sys.stderr.write(f"iter {it} loss {val:.6f} elapsed {time.perf_counter() - t0:.1f}s\n")

    return cb


def _ply_files(root: Path) -> dict[str, Path]:
    if not root.is_dir():
        raise FileNotFoundError(f"not a directory: {root}")
    return {p.relative_to(root).as_posix(): p for p in sorted(root.rglob("*.ply"))}


def _object_maps(ref: str, manifest: str | None) -> tuple[list[DepthMap], int | None]:
    if manifest is not None:
        for rec in load_manifest(manifest):
            if rec.object_id == ref:
                return [read_depthmap(rec.paths[v]) for v in range(N_VIEWS)], rec.class_id
    paths = [s for s in ref.split(",") if s]
    if not paths or not all(Path(p).is_file() for p in paths):
        raise ValueError(f"{ref!r} is neither a manifest object id nor a list of depth map files")
    return [read_depthmap(p) for p in paths], None


# commands


def cmd_rig_info(cfg: dict) -> None:
    rig = build_rig(cfg["res"], canonical_projection(cfg["projection"]))
    sys.stdout.write(rig.describe() + "\n")


def cmd_render(cfg: dict) -> None:
    mesh_path = Path(cfg["mesh"])
    out = Path(cfg["out"])
    object_id = cfg["object_id"] or mesh_path.stem
    rig = build_rig(cfg["res"], canonical_projection(cfg["projection"]))
    images = render_views(normalize_mesh(load_mesh(mesh_path)), rig)
    obj_dir = out / object_id
    obj_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for img in images:
        dm = quantize(img, cfg["bits"])
        path = obj_dir / f"view_{img.view_id:02d}.dfdm"
        write_depthmap(dm, path)
        files[img.view_id] = path
    manifest = Path(cfg["manifest"]) if cfg["manifest"] else out / "manifest.csv"
    append_manifest(manifest, object_id, cfg["class_id"], cfg["class_name"], cfg["split"], files)
    if cfg["gt_ply"]:
        Path(cfg["gt_ply"]).parent.mkdir(parents=True, exist_ok=True)
        clouds = [backproject_image(img, rig[img.view_id]) for img in images]
        write_pointcloud_ply(PointCloud(np.concatenate([c.points for c in clouds])), cfg["gt_ply"])
    sys.stdout.write(f"{obj_dir}\n")


def cmd_train(cfg: dict) -> None:
    records = load_manifest(cfg["manifest"])
    dataset = load_dataset(records, "train")
    if not dataset:
        raise ValueError("manifest has no training objects")
    ref = dataset[0].maps[0]
    if cfg["class_conditional"]:
        names = manifest_class_names(records)
    else:
        names = ["all"]
        dataset = [ObjectViews(o.object_id, 0, o.maps) for o in dataset]
    mcfg = ModelConfig(resolution=ref.resolution, bits=ref.bits, latent_dim=cfg["latent"],
                       base_channels=cfg["channels"], n_classes=len(names))
    tcfg = TrainConfig(batch_size=cfg["batch"], v_in=cfg["vin"], v_out=cfg["vin"], iterations=cfg["iters"],
                       lr=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"], bits=ref.bits, seed=cfg["seed"],
                       checkpoint_every=cfg["checkpoint_every"])
    res = run_training(dataset, mcfg, tcfg, out_dir=cfg["out"], resume=cfg["resume"], class_names=names,
                       progress=_progress(max(1, min(100, tcfg.iterations // 10 or 1))))
    sys.stdout.write(f"{res.checkpoints[-1] if res.checkpoints else cfg['out']}\n")


def cmd_reconstruct(cfg: dict) -> None:
    ck = Checkpoint.load(cfg["checkpoint"])
    maps = [read_depthmap(p) for p in cfg["input"].split(",") if p]
    cls = _class_id(cfg["class"], ck.class_names)
    views, cloud = reconstruct(maps, cls, ck.params, ck.model_config)
    out = Path(cfg["out"])
    _write_views(views, out)
    write_pointcloud_ply(cloud, out / f"{cfg['name']}.ply")
    sys.stdout.write(f"{out / (cfg['name'] + '.ply')}\n")


def cmd_eval(cfg: dict) -> None:
    pred = _ply_files(Path(cfg["pred"]))
    gt = _ply_files(Path(cfg["gt"]))
    if not gt:
        raise ValueError(f"no .ply files under {cfg['gt']}")
    if sorted(pred) != sorted(gt):
        missing = sorted(set(gt) ^ set(pred))
        raise ValueError(f"prediction and ground-truth sets differ: {missing[:5]}")
    keys = sorted(gt)
    report = evaluate_set([read_pointcloud_ply(pred[k]) for k in keys], [read_pointcloud_ply(gt[k]) for k in keys],
                          cfg["cd_samples"], cfg["emd_samples"], cfg["seed"])
    if cfg["csv"]:
        with open(cfg["csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["shape", "cd", "emd"])
            for k, c, e in zip(keys, report.cd_per_shape, report.emd_per_shape):
                w.writerow([k, repr(c), repr(e)])
    sys.stdout.write(report.table() + "\n")


def cmd_imle_train(cfg: dict) -> None:
    ck = Checkpoint.load(cfg["checkpoint"])
    records = load_manifest(cfg["manifest"])
    dataset = load_dataset(records, "train")
    names = ck.class_names or manifest_class_names(records)
    conditional = ck.model_config.n_classes > 1
    by_class: dict[int, list[np.ndarray]] = {}
    for obj in dataset:
        cid = obj.class_id if conditional else 0
        by_class.setdefault(cid, []).append(identity_of(obj.maps, ck.params, ck.model_config))
    wanted = sorted(by_class) if cfg["class"] is None else [_class_id(cfg["class"], names)]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for cid in wanted:
        if cid not in by_class:
            raise ValueError(f"no training objects for class {cid}")
        codes = np.stack(by_class[cid])
        write_identity_bank(codes, out / f"identities_{cid:03d}.dfid")
        icfg = ImleConfig(noise_dim=cfg["noise_dim"], hidden=cfg["hidden"], latent_dim=codes.shape[1],
                          oversample=cfg["oversample"], epochs=cfg["epochs"], batch_size=cfg["imle_batch"],
                          lr=cfg["imle_lr"], seed=cfg["seed"])
        model = imle_fit(codes, icfg)
        model.save(out / f"imle_{cid:03d}.dfck",
                   {"class_id": cid, "checkpoint": str(Path(cfg["checkpoint"]).resolve())})
        sys.stdout.write(f"{out / f'imle_{cid:03d}.dfck'}\n")


def cmd_sample(cfg: dict) -> None:
    model, meta = ImleModel.load(cfg["imle"])
    ck = Checkpoint.load(cfg["checkpoint"] or meta["checkpoint"])
    cls = meta.get("class_id", 0) if cfg["class"] is None else _class_id(cfg["class"], ck.class_names)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for k in range(cfg["n"]):
        z = sample_identity(model, cfg["seed"] + k)
        _, cloud = decode_views(z, cls, ck.params, ck.model_config, projection=ck.projection)
        write_pointcloud_ply(cloud, out / f"sample_{k:03d}.ply")
    sys.stdout.write(f"{out}\n")


def cmd_interpolate(cfg: dict) -> None:
    if cfg["steps"] < 2:
        raise ValueError("--steps must be at least 2")
    ck = Checkpoint.load(cfg["checkpoint"])
    maps_a, cls_a = _object_maps(cfg["a"], cfg["manifest"])
    maps_b, _ = _object_maps(cfg["b"], cfg["manifest"])
    if cfg["class"] is not None:
        cls = _class_id(cfg["class"], ck.class_names)
    else:
        cls = cls_a if cls_a is not None and cls_a < ck.model_config.n_classes else 0
    za = identity_of(maps_a, ck.params, ck.model_config)
    zb = identity_of(maps_b, ck.params, ck.model_config)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    ref = maps_a[0]
    for i, t in enumerate(np.linspace(0.0, 1.0, cfg["steps"])):
        _, cloud = decode_views(slerp(za, zb, float(t)), cls, ck.params, ck.model_config,
                                ref.near, ref.far, ref.projection)
        write_pointcloud_ply(cloud, out / f"step_{i:02d}.ply")
    sys.stdout.write(f"{out}\n")


def cmd_export_embeddings(cfg: dict) -> None:
    ck = Checkpoint.load(cfg["checkpoint"])
    names = ck.class_names or [str(i) for i in range(ck.model_config.n_classes)]
    export_embeddings(ck.params, names, cfg["out"])
    sys.stdout.write(f"{cfg['out']}\n")


# ablation


def toy_meshes():
    """The built-in two-shape toy set: a sphere and a flat box."""
    return {"sphere": icosphere(3), "box": box((0.8, 0.4, 0.6), 8)}


AXIS_DEFAULTS = {"bits": "5,6,7,8", "vin": "1,2,3,4", "projection": "ortho,persp"}
ABLATION_FIELDS = {
    "bits": ["precision"],
    "vin": ["batch_size", "v_in"],
    "projection": ["projection"],
}


def _ablation_runs(cfg: dict) -> list[dict]:
    values = [v.strip() for v in (cfg["values"] or AXIS_DEFAULTS[cfg["axis"]]).split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    runs = []
    for v in values:
        run = {"bits": cfg["bits"], "vin": cfg["vin"], "batch": cfg["batch"],
               "projection": canonical_projection(cfg["projection"])}
        if cfg["axis"] == "bits":
            run["bits"] = int(v)
        elif cfg["axis"] == "vin":
            run["vin"] = int(v)
            run["batch"] = max(1, round(cfg["batch"] * 2 / run["vin"]))
        else:
            run["projection"] = canonical_projection(v)
        runs.append(run)
    return runs


def run_ablation(cfg: dict) -> list[dict]:
    meshes = {k: normalize_mesh(m) for k, m in toy_meshes().items()}
    rows = []
    for run in _ablation_runs(cfg):
        rig = build_rig(cfg["res"], run["projection"])
        objects, truths = [], []
        for i, mesh in enumerate(meshes.values()):
            images = render_views(mesh, rig)
            objects.append(ObjectViews(str(i), 0, [quantize(img, run["bits"]) for img in images]))
            truths.append(PointCloud(np.concatenate([backproject_image(img, rig[img.view_id]).points
                                                     for img in images])))
        mcfg = ModelConfig(resolution=cfg["res"], bits=run["bits"], latent_dim=cfg["latent"],
                           base_channels=cfg["channels"], n_classes=1)
        tcfg = TrainConfig(batch_size=run["batch"], v_in=run["vin"], v_out=run["vin"], iterations=cfg["iters"],
                           lr=cfg["lr"], bits=run["bits"], seed=cfg["seed"], checkpoint_every=max(1, cfg["iters"]))
        sys.stderr.write(f"ablate {cfg['axis']}: bits={run['bits']} vin={run['vin']} batch={run['batch']} "
                         f"projection={run['projection']}\n")
        res = run_training(objects, mcfg, tcfg)
        recon = [reconstruct(o.maps, 0, res.params, mcfg)[1] for o in objects]
        svr = [reconstruct([o.maps[cfg["svr_view"]]], 0, res.params, mcfg)[1] for o in objects]
        key = {"bits": {"precision": run["bits"]},
               "vin": {"batch_size": run["batch"], "v_in": run["vin"]},
               "projection": {"projection": run["projection"]}}[cfg["axis"]]
        for mode, preds in (("recon", recon), ("svr", svr)):
            if any(not len(p.points) for p in preds):
                # an undertrained model may predict all background; metrics are informational
                scores = (float("nan"),) * 3
            else:
                rep = evaluate_set(preds, truths, cfg["cd_samples"], cfg["emd_samples"], cfg["seed"])
                scores = (rep.cd_mean, rep.cd_median, rep.emd_mean)
            rows.append({**key, "quant_bound": half_bin(run["bits"]), "mode": mode,
                         **dict(zip(("cd_mean", "cd_median", "emd"), scores))})
    return rows


def cmd_ablate(cfg: dict) -> None:
    rows = run_ablation(cfg)
    fields = ABLATION_FIELDS[cfg["axis"]] + ["quant_bound", "mode", "cd_mean", "cd_median", "emd"]
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    sys.stdout.write(f"{out}\n")


HANDLERS = {
    "rig-info": cmd_rig_info,
    "render": cmd_render,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "imle-train": cmd_imle_train,
    "sample": cmd_sample,
    "interpolate": cmd_interpolate,
    "export-embeddings": cmd_export_embeddings,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(ns.command, ns)
        if ns.command == "ablate":
            _ablation_runs(cfg)
    except (UsageError, ValueError) as exc:
        _emit_error("UsageError", str(exc))
        return 2
    sys.stderr.write(json.dumps({"command": ns.command, "config": cfg}, sort_keys=True) + "\n")
    try:
        HANDLERS[ns.command](cfg)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        log.debug("command failed", exc_info=True)
        _emit_error(type(exc).__name__, str(exc))
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
