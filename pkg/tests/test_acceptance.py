"""Acceptance criteria, one test (or a small group) per criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary ends with a
PASS/FAIL line for every criterion. A criterion known to be unattainable is
marked ``xfail(strict=True)``: its assertions are the full criterion, it
reports FAIL, and it turns the run red if it ever starts passing unnoticed.
"""

import csv
import itertools
import math
import time

import numpy as np
import pytest

from depthforge import numcore as nc
from depthforge.camrig import build_rig
from depthforge.cli import main as cli_main
from depthforge.cli import toy_meshes
from depthforge.depthcodec import DepthMap, PointCloud, backproject, backproject_image, half_bin, one_hot, quantize
from depthforge.imle import ImleConfig, ImleModel, imle_fit, match, matched_distances, slerp
from depthforge.io_store import (
    BadMagicError,
    InvalidCodeError,
    TruncatedFileError,
    UnsupportedVersionError,
    decode_depthmap,
    export_embeddings,
    read_depthmap,
    read_embeddings,
    read_identity_bank,
    read_pointcloud_ply,
    write_depthmap,
    write_identity_bank,
    write_pointcloud_ply,
)
from depthforge.metrics import chamfer, emd, evaluate_set
from depthforge.model import (
    ModelConfig,
    average_groups,
    encode,
    encode_onehot,
    generate,
    generate_batch,
    init_params,
    kl_loss,
    param_shapes,
    smoothed_target,
)
from depthforge.rasterizer import normalize_mesh, render_views
from depthforge.shapes import icosphere
from depthforge.trainer import ObjectViews, TrainConfig, batch_loss, code_accuracy, reconstruct, run_training

criterion = pytest.mark.criterion


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


# rig geometry


@criterion("Rig geometry")
def test_rig_geometry():
    with Timer() as t:
        p = build_rig().positions
        assert p.shape == (20, 3)
        assert np.max(np.abs(np.linalg.norm(p, axis=1) - 2.5)) < 1e-9
        for q in p:
            assert np.min(np.linalg.norm(p + q, axis=1)) < 1e-9
        d = np.linalg.norm(p[:, None] - p[None], axis=2)
        for row in np.sort(d, axis=1):
            nn = row[1:4]
            assert nn.max() - nn.min() < 1e-9 and row[4] - nn.max() > 1e-3
    assert t.elapsed < 1.0


# render / quantize / back-project


def _sphere_error(bits, rig, images):
    pts = np.concatenate([backproject(quantize(im, bits), rig[im.view_id]).points for im in images])
    return np.abs(np.linalg.norm(pts, axis=1) - 0.5)


def _chord_error(mesh, radius=0.5):
    v = mesh.vertices[mesh.triangles]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    plane = np.abs(np.sum(n * v[:, 0], axis=1))
    return radius - plane.min()


@criterion("Render/quantize/back-project round trip")
@pytest.mark.parametrize("projection", ["orthographic", "perspective"])
def test_render_round_trip(projection):
    with Timer() as t:
        mesh = normalize_mesh(icosphere(4))
        assert len(mesh.triangles) >= 4000
        rig = build_rig(64, projection)
        images = render_views(mesh, rig)
        # smallest cosine between a pixel ray and the view axis
        _, d = rig[0].rays()
        cos_min = float(np.min(d @ rig[0].forward))
        footprint = rig[0].pixel_footprint(3.0)
        chord = _chord_error(mesh)
        maxima = []
        for bits in (5, 6, 7, 8):
            err = _sphere_error(bits, rig, images)
            eps = half_bin(bits) / cos_min + footprint + chord
            assert np.all(err <= eps), (bits, err.max(), eps)
            maxima.append(err.max())
        assert abs(half_bin(8) - 1 / 508) < 1e-15
        assert all(a > b for a, b in zip(maxima, maxima[1:])), maxima
    assert t.elapsed < 30.0


# metric oracles


def _brute_chamfer(a, b):
    d = np.sum((a[:, None] - b[None]) ** 2, axis=2)
    return d.min(axis=1).mean() + d.min(axis=0).mean()


def _brute_emd(a, b):
    n = len(a)
    cost = np.linalg.norm(a[:, None] - b[None], axis=2)
    perms = np.array(list(itertools.permutations(range(n))))
    return cost[np.arange(n), perms].sum(axis=1).min() / n


@criterion("Metric oracles")
def test_metric_oracles():
    rng = np.random.default_rng(0)
    with Timer() as t:
        for _ in range(100):
            a, b = rng.standard_normal((200, 3)), rng.standard_normal((200, 3))
            assert abs(chamfer(a, b) - _brute_chamfer(a, b)) < 1e-12
        for trial in range(200):
            n = 1 + trial % 7
            a, b = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
            assert abs(emd(a, b) - _brute_emd(a, b)) < 1e-12
        a = rng.standard_normal((500, 3))
        assert chamfer(a, a) == 0.0 and emd(a[:100], a[:100]) == 0.0
        assert chamfer(np.zeros((1, 3)), np.array([[1.0, 0, 0]])) == 2.0
        rep = evaluate_set([np.zeros((1, 3))], [np.array([[1.0, 0, 0]])], cd_samples=1, emd_samples=1)
        assert rep.cd_mean == 2000.0
    assert t.elapsed < 60.0


# gradient correctness


def _param(rng, *shape):
    return nc.Tensor(rng.standard_normal(shape), requires_grad=True)


def _probe(rng, out):
    return nc.Tensor(rng.standard_normal(out.shape))


def _dot(fn, rng):
    r = _probe(rng, fn())
    return lambda: nc.tsum(nc.mul(fn(), r))


@criterion("Gradient correctness")
def test_gradient_correctness():
    rng = np.random.default_rng(1)
    with Timer() as t:
        tight, loose = [], []
        x35, w45, b4 = _param(rng, 3, 5), _param(rng, 4, 5), _param(rng, 4)
        tight.append((lambda: nc.tsum(nc.square(nc.linear(x35, w45, b4))), [x35, w45, b4]))
        a, b = _param(rng, 3, 4), _param(rng, 4)
        tight.append((lambda: nc.mean(nc.mul(nc.add(a, b), nc.leaky_relu(a))), [a, b]))
        m1, m2 = _param(rng, 2, 3, 4), _param(rng, 4, 5)
        tight.append((lambda: nc.tsum(nc.square(nc.matmul(m1, m2))), [m1, m2]))
        u = _param(rng, 1, 2, 3, 4)
        tight.append((_dot(lambda: nc.upsample2x(u), rng), [u]))
        s = _param(rng, 2, 5, 3, 3)
        tight.append((_dot(lambda: nc.softmax(s), rng), [s]))
        tight.append((_dot(lambda: nc.log_softmax(s), rng), [s]))
        tab = _param(rng, 5, 3)
        tight.append((_dot(lambda: nc.embedding(tab, [1, 4, 1, 0]), rng), [tab]))
        tgt = smoothed_target(rng.integers(0, 32, (2, 3, 3)), 5, 0.2)
        lg = _param(rng, *tgt.shape)
        tight.append((lambda: kl_loss(tgt, lg), [lg]))

        for k, stride, pad in [(1, 1, 0), (3, 1, 1), (3, 2, 0), (1, 2, 0)]:
            cx, cw, cb = _param(rng, 2, 3, 6, 6), _param(rng, 4, 3, k, k), _param(rng, 4)
            loose.append((_dot(lambda cx=cx, cw=cw, cb=cb, s_=stride, p=pad: nc.conv2d(cx, cw, cb, s_, p), rng),
                          [cx, cw, cb]))
        for demod in (True, False):
            mx, mw, ms, mb = _param(rng, 2, 3, 5, 5), _param(rng, 4, 3, 3, 3), _param(rng, 2, 3), _param(rng, 4)
            loose.append((_dot(lambda mx=mx, mw=mw, ms=ms, mb=mb, d=demod: nc.modulated_conv2d(mx, mw, ms, d, mb),
                               rng), [mx, mw, ms, mb]))
        pn = _param(rng, 3, 6)
        loose.append((_dot(lambda: nc.pixel_norm(pn), rng), [pn]))
        sd = _param(rng, 4, 3, 2, 2)
        loose.append((_dot(lambda: nc.minibatch_stddev(sd, 2), rng), [sd]))

        for fn, params in tight:
            assert nc.gradient_check(fn, params, n_samples=100) < 1e-6
        for fn, params in loose:
            assert nc.gradient_check(fn, params, n_samples=100) < 1e-4

        for base in (8, 16):
            cfg = ModelConfig(resolution=16, bits=5, latent_dim=16, base_channels=base, n_classes=2, style_layers=2)
            params = init_params(cfg, seed=base)
            maps = [DepthMap(rng.integers(0, 32, (16, 16)), bits=5, view_id=v) for v in (0, 4, 9, 13)]
            x = nc.Tensor(np.stack([one_hot(m) for m in maps]))
            target = smoothed_target(np.stack([m.codes for m in maps[:2]]), 5, cfg.eps_smooth)

            def loss(params=params, cfg=cfg, x=x, target=target):
                z = average_groups(encode_onehot(x, params, cfg, group_size=2), 2)
                return kl_loss(target, generate_batch(z, [0, 1], [3, 11], params, cfg))

            assert nc.gradient_check(loss, list(params.values()), n_samples=100, seed=base) < 1e-4
    assert t.elapsed < 120.0


# architecture lock

# Derived by hand from the encoder and generator tables with a bias on every
# convolution and linear layer and a biased 512 -> C_in style affine per ModConv.
CANONICAL_ENCODER_PARAMS = 23_736_320
CANONICAL_GENERATOR_PARAMS = 24_702_720


def _table_shapes():
    enc = [("conv", 256, 256, 1), ("res0.a", 256, 256, 3), ("res0.b", 256, 512, 3), ("res0.skip", 256, 512, 1)]
    for i in (1, 2, 3):
        enc += [(f"res{i}.a", 512, 512, 3), (f"res{i}.b", 512, 512, 3), (f"res{i}.skip", 512, 512, 1)]
    enc += [("final", 513, 512, 3)]
    gen = [("conv1", 512, 512, 3), ("to_rgb1", 512, 256, 1)]
    styled = [(512, 512), (512, 512), (512, 512), (512, 512), (512, 512), (512, 512), (512, 256), (256, 256)]
    gen += [(f"styled{i}", ci, co, 3) for i, (ci, co) in enumerate(styled)]
    gen += [(f"to_rgbs{i}", ci, 256, 1) for i, ci in enumerate((512, 512, 512, 256))]
    return enc, gen


@criterion("Architecture lock")
def test_architecture_lock():
    cfg = ModelConfig()
    shapes = param_shapes(cfg)
    enc_tab, gen_tab = _table_shapes()
    enc_convs = [s for k, s in shapes.items() if k.startswith("enc.") and k.endswith(".w") and len(s) == 4]
    assert [(s[1], s[0], s[2]) for s in enc_convs] == [(ci, co, k) for _, ci, co, k in enc_tab]
    assert shapes["enc.fc1.w"] == (512, 8192) and shapes["enc.fc2.w"] == (512, 512)
    gen_convs = [s for k, s in shapes.items() if k.startswith("gen.") and k.endswith(".w") and len(s) == 4]
    assert sorted((s[1], s[0], s[2]) for s in gen_convs) == sorted((ci, co, k) for _, ci, co, k in gen_tab)
    assert [shapes[f"gen.style{i}.w"] for i in range(8)] == [(512, 512)] * 8
    assert shapes["gen.view_emb"] == (20, 4096) and shapes["gen.class_emb"] == (55, 4096)
    count = lambda pre: sum(math.prod(s) for k, s in shapes.items() if k.startswith(pre))
    assert count("enc.") == CANONICAL_ENCODER_PARAMS
    assert count("gen.") == CANONICAL_GENERATOR_PARAMS

    params = init_params(cfg, seed=0)
    dm = DepthMap(np.random.default_rng(0).integers(0, 256, (64, 64)), bits=8, view_id=0)
    assert one_hot(dm).shape == (256, 64, 64)
    z = encode(dm, params, cfg)
    assert z.shape == (512,) and np.all(np.isfinite(z))
    logits = generate(z, 54, 19, params, cfg)
    assert logits.shape == (256, 64, 64) and np.all(np.isfinite(logits))


# label smoothing


@criterion("Label smoothing")
def test_label_smoothing():
    rng = np.random.default_rng(3)
    codes = rng.integers(0, 256, (3, 16, 16))
    t = smoothed_target(codes, 8, 0.2)
    assert np.max(np.abs(t.sum(axis=1) - 1.0)) < 1e-12
    gt = np.take_along_axis(t, codes[:, None], axis=1)
    assert np.all(gt == 0.8)
    assert abs(kl_loss(t, nc.Tensor(np.log(t))).item()) < 1e-12
    for _ in range(100):
        logits = nc.Tensor(rng.standard_normal(t.shape) * rng.uniform(0.1, 20.0))
        assert kl_loss(t, logits).item() >= 0.0


# overfit

OVERFIT_BASE_CHANNELS = 16
OVERFIT_BATCH = 2
OVERFIT_VIEWS = 2
OVERFIT_SVR_VIEW = 3


@pytest.fixture(scope="module")
def overfit_run():
    rig = build_rig(32, "orthographic")
    objects, truths = [], []
    for i, mesh in enumerate(toy_meshes().values()):
        images = render_views(normalize_mesh(mesh), rig)
        objects.append(ObjectViews(str(i), 0, [quantize(im, 6) for im in images]))
        truths.append(np.concatenate([backproject_image(im, rig[im.view_id]).points for im in images]))
    mcfg = ModelConfig(resolution=32, bits=6, latent_dim=64, base_channels=OVERFIT_BASE_CHANNELS, n_classes=1)
    tcfg = TrainConfig(batch_size=OVERFIT_BATCH, v_in=OVERFIT_VIEWS, v_out=OVERFIT_VIEWS, iterations=2000,
                       lr=4e-3, beta1=0.0, beta2=0.99, bits=6, seed=0)
    with Timer() as t:
        res = run_training(objects, mcfg, tcfg)
    return objects, truths, mcfg, res, t.elapsed


@criterion("Overfit smoke test")
@pytest.mark.xfail(strict=True, reason="2000 iterations do not reach 99% per-view code accuracy; see ledger")
def test_overfit(overfit_run):
    objects, truths, mcfg, res, elapsed = overfit_run
    assert elapsed < 15 * 60
    losses = np.array(res.losses)
    assert losses[-50:].mean() < 0.05 * losses[0]
    bound = half_bin(6)
    for obj, truth in zip(objects, truths):
        pred, _ = reconstruct(obj.maps, 0, res.params, mcfg)
        assert np.all(code_accuracy(pred, obj.maps) > 0.99)
        _, cloud = reconstruct([obj.maps[OVERFIT_SVR_VIEW]], 0, res.params, mcfg)
        assert len(cloud.points) and chamfer(cloud.points, truth, squared=False) < 10 * bound


# training invariances


@pytest.fixture(scope="module")
def small_set():
    rig = build_rig(16)
    out = []
    for i, mesh in enumerate(toy_meshes().values()):
        out.append(ObjectViews(str(i), 0, [quantize(im, 5) for im in render_views(normalize_mesh(mesh), rig)]))
    return out


SMALL = ModelConfig(resolution=16, bits=5, latent_dim=16, base_channels=8, n_classes=1)


@criterion("Training invariances")
def test_training_invariances(small_set, tmp_path):
    params = init_params(SMALL, 0)
    outs = [[0, 5], [2, 9]]
    a = batch_loss(small_set, [[3, 7], [1, 12]], outs, params, SMALL).item()
    b = batch_loss(small_set, [[7, 3], [12, 1]], outs, params, SMALL).item()
    assert a == b
    cfg = TrainConfig(batch_size=2, v_in=2, v_out=2, iterations=6, bits=5, seed=3, checkpoint_every=3)
    first = run_training(small_set, SMALL, cfg)
    assert first.losses == run_training(small_set, SMALL, cfg).losses
    full = run_training(small_set, SMALL, cfg, out_dir=tmp_path / "full")
    part = run_training(small_set, SMALL, cfg, out_dir=tmp_path / "part", stop_after=3)
    resumed = run_training(small_set, SMALL, cfg, out_dir=tmp_path / "part", resume=part.checkpoints[-1])
    assert resumed.losses == full.losses == first.losses
    assert all(np.array_equal(full.params[k].data, resumed.params[k].data) for k in full.params)


# IMLE


def _ring(n=8, radius=2.0):
    a = np.arange(n) * 2 * np.pi / n
    return np.stack([np.cos(a), np.sin(a)], axis=1) * radius


@criterion("IMLE contract")
def test_imle_match_is_exhaustive():
    rng = np.random.default_rng(7)
    for m in (1, 2, 16, 1000, 10000):
        model = ImleModel(ImleConfig(latent_dim=2, seed=m))
        bank = rng.standard_normal((m, 64))
        tb = model.transform(bank)
        for s in rng.standard_normal((4, 2)) * 2:
            d = np.sum((tb - s) ** 2, axis=1)
            assert match(bank, model, s) == int(np.flatnonzero(d == d.min())[0])


@criterion("IMLE contract")
@pytest.mark.xfail(strict=True, reason="a fresh 2N bank leaves codes uncovered; see ledger")
def test_imle_convergence():
    codes = _ring()
    spacing = np.min([np.linalg.norm(a - b) for a, b in itertools.combinations(codes, 2)])
    with Timer() as t:
        cfg = ImleConfig(latent_dim=2, batch_size=8, epochs=100, seed=0)
        model, hist = imle_fit(codes, cfg, history=True)
    assert t.elapsed < 60.0
    assert hist.last_bank.shape[0] == 2 * len(codes)
    assert matched_distances(model, hist.last_bank, codes).mean() < 0.01 * spacing


# slerp


@criterion("Slerp")
def test_slerp():
    rng = np.random.default_rng(11)
    for _ in range(50):
        a, b = rng.standard_normal(512), rng.standard_normal(512)
        assert np.array_equal(slerp(a, b, 0.0), a) and np.array_equal(slerp(a, b, 1.0), b)
        for t in rng.uniform(0, 1, 5):
            assert np.max(np.abs(slerp(a, b, t) - slerp(b, a, 1 - t))) < 1e-12
    q, _ = np.linalg.qr(rng.standard_normal((512, 2)))
    a, b = q[:, 0], q[:, 1]
    assert np.max(np.abs(slerp(a, b, 0.5) - (a + b) / math.sqrt(2))) < 1e-12


# formats


@criterion("Format round trips")
def test_format_round_trips(tmp_path):
    rng = np.random.default_rng(5)
    for bits in (5, 6, 7, 8):
        for proj in ("orthographic", "perspective"):
            dm = DepthMap(rng.integers(0, 2**bits, (64, 64)), bits=bits, view_id=int(rng.integers(20)),
                          projection=proj)
            path = tmp_path / f"m{bits}{proj}.dfdm"
            write_depthmap(dm, path)
            assert path.stat().st_size == 16 + 64 * 64
            back = read_depthmap(path)
            assert back == dm
            write_depthmap(back, tmp_path / "again.dfdm")
            assert (tmp_path / "again.dfdm").read_bytes() == path.read_bytes()

    codes = rng.standard_normal((7, 512))
    write_identity_bank(codes, tmp_path / "b.dfid")
    assert np.array_equal(read_identity_bank(tmp_path / "b.dfid"), codes)

    table = nc.Tensor(rng.standard_normal((3, 4096)))
    export_embeddings({"gen.class_emb": table}, ["chair", "car", "plane"], tmp_path / "e.csv")
    names, back = read_embeddings(tmp_path / "e.csv")
    assert names == ["chair", "car", "plane"] and np.max(np.abs(back - table.data)) < 1e-7

    pts = rng.uniform(-0.5, 0.5, (1000, 3))
    write_pointcloud_ply(PointCloud(pts), tmp_path / "c.ply")
    assert np.max(np.abs(read_pointcloud_ply(tmp_path / "c.ply").points - pts)) < 1e-7

    good = (tmp_path / "m8orthographic.dfdm").read_bytes()
    cases = {
        BadMagicError: b"XXXX" + good[4:],
        UnsupportedVersionError: good[:4] + bytes([99]) + good[5:],
        TruncatedFileError: good[:100],
        InvalidCodeError: None,
    }
    low = DepthMap(np.zeros((8, 8), dtype=np.uint8), bits=5)
    write_depthmap(low, tmp_path / "low.dfdm")
    raw = bytearray((tmp_path / "low.dfdm").read_bytes())
    raw[20] = 200
    cases[InvalidCodeError] = bytes(raw)
    raised = set()
    for err, buf in cases.items():
        with pytest.raises(err) as info:
            decode_depthmap(buf)
        raised.add(type(info.value))
    assert raised == set(cases)
    (tmp_path / "bad.dfid").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(BadMagicError):
        read_identity_bank(tmp_path / "bad.dfid")


# ablation harness


@criterion("Ablation harness")
def test_ablation_harness(tmp_path, capsys):
    out = tmp_path / "bits.csv"
    assert cli_main(["ablate", "--axis", "bits", "--out", str(out)]) == 0
    capsys.readouterr()
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["precision", "quant_bound", "mode", "cd_mean", "cd_median", "emd"]
    assert [(int(r["precision"]), r["mode"]) for r in rows] == [
        (b, m) for b in (5, 6, 7, 8) for m in ("recon", "svr")
    ]
    bounds = [float(r["quant_bound"]) for r in rows if r["mode"] == "recon"]
    assert bounds == [half_bin(b) for b in (5, 6, 7, 8)]
    assert all(a > b for a, b in zip(bounds, bounds[1:]))
