"""Acceptance criteria A1-A11. Each test records one PASS/FAIL line for the terminal summary."""

import json
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from ditfuse import cli, flow, imaging, judge, m3, metrics, model, train
from ditfuse import prompt as P
from ditfuse.m3 import CellAssign
from ditfuse.model import ModelConfig
from ditfuse.tensor import Tensor, backward, square, tsum
from conftest import ACCEPTANCE, smooth_image
from gradcheck import check_grad
from test_prompt import all_tag_pairs, brute_mask
from test_tensor import OPS

SLOTS = "<img><|image_1|></img> <img><|image_2|></img>"
CANONICAL = f"[FUSION] <MULTI-FOCUS> {SLOTS} fuse"


@contextmanager
def criterion(key, what):
    notes: list[str] = []
    try:
        yield notes
    except BaseException as exc:
        ACCEPTANCE[key] = (False, f"{what}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''} {' '.join(notes)}".rstrip())
        print(f"{key} FAIL")
        raise
    ACCEPTANCE[key] = (True, f"{what} {' '.join(notes)}".rstrip())
    print(f"{key} PASS")


# ------------------------------------------------------------- A1


def e2e_gradcheck(rng, h=1e-5):
    cfg = ModelConfig(d_model=8, n_layers=1, n_heads=2, lora_rank=2)
    params = model.init_params(cfg, np.float64)
    for p in params.values():
        p.data = rng.standard_normal(p.shape) * 0.3
    codec = model.Codec(cfg.latent_factor, cfg.codec_seed)
    cond = (codec.encode(smooth_image(rng, 8)), codec.encode(smooth_image(rng, 8)))
    batch = model.pack_batch(cfg, [P.tokenize(CANONICAL)], [cond], cond[0].shape[:2])
    noisy = rng.standard_normal((1, *cond[0].shape))
    t = np.array([0.37])

    def loss():
        return tsum(square(model.forward(params, cfg, batch, noisy, t)))

    backward(loss())
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if name == "tok_emb":
            idx = batch.text_ids[0, :4] * cfg.d_model + rng.integers(cfg.d_model, size=4)
        else:
            idx = rng.choice(flat.size, size=min(4, flat.size), replace=False)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            fp = loss().data
            flat[k] = orig - h
            fm = loss().data
            flat[k] = orig
            num = (fp - fm) / (2 * h)
            ana = p.grad.reshape(-1)[k]
            worst = max(worst, abs(ana - num) / max(abs(num), 1e-6) if abs(num) > 1e-6 else abs(ana - num))
    return worst


def test_a1_gradient_suite():
    with criterion("A1", "gradient suite") as notes:
        t0 = time.perf_counter()
        for name, (fn, make) in sorted(OPS.items()):
            rng = np.random.default_rng(sum(map(ord, name)))
            for _ in range(20):
                check_grad(fn, make(rng), h=1e-3, rtol=1e-4, atol=1e-6)
        worst = e2e_gradcheck(np.random.default_rng(0))
        elapsed = time.perf_counter() - t0
        notes.append(f"ops={len(OPS)} e2e_rel={worst:.2e} time={elapsed:.1f}s")
        assert worst <= 1e-3
        assert elapsed < 60


# ------------------------------------------------------------- A2


def test_a2_flow_identities():
    with criterion("A2", "interpolation and loss identities") as notes:
        rng = np.random.default_rng(2)
        x, eps = rng.standard_normal((4, 8, 8, 12)), rng.standard_normal((4, 8, 8, 12))
        assert flow.interpolate(x, eps, 0.0).tobytes() == eps.tobytes()
        assert flow.interpolate(x, eps, 1.0).tobytes() == x.tobytes()
        assert float(flow.fm_loss(x - eps, x, eps).data) == 0.0
        h = 1e-6
        worst = 0.0
        for t in np.linspace(0.05, 0.95, 10):
            fd = (flow.interpolate(x, eps, t + h) - flow.interpolate(x, eps, t - h)) / (2 * h)
            worst = max(worst, float(np.abs(fd - (x - eps)).max()))
        notes.append(f"dx/dt err={worst:.1e}")
        assert worst <= 1e-8


# ------------------------------------------------------------- A3


def test_a3_sampler_exactness():
    with criterion("A3", "Euler sampler with oracle velocity") as notes:
        rng = np.random.default_rng(3)
        target = rng.standard_normal((8, 8, 12))
        for k in (1, 4, 32):
            eps0 = np.random.default_rng(k).standard_normal(target.shape)
            out = flow.sample_euler(lambda x, t, c: target - eps0, None, target.shape, steps=k, rng=np.random.default_rng(k))
            err = float(np.abs(out - target).max())
            notes.append(f"K={k}:{err:.1e}")
            assert err <= 1e-6


# ------------------------------------------------------------- A4


def random_layout(rng):
    wrapped = bool(rng.integers(2))
    img = [[P.IMG_OPEN_ID, i, P.IMG_CLOSE_ID] if wrapped else [i] for i in P.IMAGE_IDS]
    text = lambda: [int(v) for v in rng.integers(60, 120, size=rng.integers(0, 6))]
    toks = text() + img[0] + text() + img[1] + text()
    return P.assemble_sequence(toks, tuple(int(v) for v in rng.integers(1, 7, size=2)), int(rng.integers(1, 7)))


def test_a4_mask_rule():
    with criterion("A4", "hybrid attention mask") as notes:
        rng = np.random.default_rng(4)
        for _ in range(200):
            lay = random_layout(rng)
            np.testing.assert_array_equal(P.build_attention_mask(lay), brute_mask(lay))
        golden = P.assemble_sequence(P.tokenize(CANONICAL), (4, 4), 4)
        m = P.build_attention_mask(golden)
        np.testing.assert_array_equal(m, brute_mask(golden))
        c0, c1, nz = golden.cond(0), golden.cond(1), golden.noisy
        assert m[c0.start : c0.end, c0.start : c0.end].all()
        assert not m[c0.start : c0.end, c1.start : c1.end].any()
        assert m[nz.start : nz.end, : nz.end].all()
        notes.append(f"200 layouts + canonical (length {golden.length})")


# ------------------------------------------------------------- A5


def check_plan_and_views(img, p, a, b, jf):
    rows, cols = p.cells.shape
    assert p.count(CellAssign.BOTH) == int(np.floor(rows * cols * jf + 0.5))
    for r in range(rows):
        for c in range(cols):
            ys, xs = p.cell_slices(r, c)
            clean = (np.array_equal(a[ys, xs], img[ys, xs]), np.array_equal(b[ys, xs], img[ys, xs]))
            want = {CellAssign.A: (False, True), CellAssign.B: (True, False), CellAssign.BOTH: (False, False)}[CellAssign(p.cells[r, c])]
            assert clean == want


def test_a5_m3_pipeline():
    with criterion("A5", "M3 plans on 128x128") as notes:
        rng = np.random.default_rng(5)
        img = rng.random((128, 128, 3))
        t0 = time.perf_counter()
        for grid in (16, 32, 64):
            for k in range(1000):
                jf = float(rng.random())
                seed = int(rng.integers(2**32))
                p = m3.plan(128, 128, grid, jf, np.random.default_rng(seed))
                a, b, target = m3.synthesize_m3_pair(img, p, np.random.default_rng(seed + 1))
                assert target.tobytes() == img.tobytes()
                check_plan_and_views(img, p, a, b, jf)
                p2 = m3.plan(128, 128, grid, jf, np.random.default_rng(seed))
                a2, b2, _ = m3.synthesize_m3_pair(img, p2, np.random.default_rng(seed + 1))
                assert a.tobytes() == a2.tobytes() and b.tobytes() == b2.tobytes()
        notes.append(f"3000 plans in {time.perf_counter() - t0:.0f}s")


# ------------------------------------------------------------- A6


def tiny_samples(cfg, n, seed):
    r = np.random.default_rng(seed)
    c = cfg.latent_channels
    toks = P.tokenize(CANONICAL)
    return [train.TrainSample(str(k), toks, (r.standard_normal((4, 4, c)), r.standard_normal((4, 4, c))), r.standard_normal((4, 4, c))) for k in range(n)]


def test_a6_lora():
    with criterion("A6", "LoRA adapters") as notes:
        rng = np.random.default_rng(6)
        x = Tensor(rng.standard_normal((5, 16)).astype(np.float32))
        w = Tensor((rng.standard_normal((16, 24)) / 4).astype(np.float32))
        a = Tensor((rng.standard_normal((24, 8)) * 0.1).astype(np.float32))
        b = Tensor((rng.standard_normal((16, 8)) * 0.1).astype(np.float32))
        assert model.lora_apply(x, w, a, b, alpha=0.0).data.tobytes() == model.lora_apply(x, w).data.tobytes()
        merged = x.data @ model.merge_lora(w.data, a.data, b.data, 0.5)
        gap = float(np.abs(model.lora_apply(x, w, a, b, 0.5).data - merged).max())
        assert gap <= 1e-5
        cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, lora_rank=4)
        tc = {"lr": 1e-3, "batch": 4, "epochs": 1000, "seed": 0, "trainable": "lora"}
        st = train.new_state(cfg, tc)
        frozen = {k: p.data.tobytes() for k, p in st.params.items() if k not in st.trainable}
        train.run_training(st, tiny_samples(cfg, 4, 0), tc, max_steps=500)
        assert st.step == 500
        assert all(st.params[k].data.tobytes() == v for k, v in frozen.items())
        notes.append(f"merge gap={gap:.1e}, {len(frozen)} base tensors frozen over 500 steps")


# ------------------------------------------------------------- A7


A7_STEPS = 2000


@pytest.mark.slow
def test_a7_desk_scale_convergence(tmp_path):
    """Overfit 8 M3 samples with the desk-scale model at lr 1e-4."""
    with criterion("A7", "desk-scale convergence") as notes:
        rng = np.random.default_rng(7)
        images = tmp_path / "images"
        images.mkdir()
        for k in range(8):
            imaging.save_png(smooth_image(rng, 32), images / f"src{k}.png")
        cfg = {
            "train": {"lr": 1e-4, "batch": 8, "trainable": "full", "epochs": A7_STEPS, "max_steps": A7_STEPS},
            "data": {"total": 8, "mix_weights": {"m3": 1.0, "seg": 0.0, "control": 0.0, "fusion": 0.0}, "image_size": 32},
        }
        conf = tmp_path / "a7.json"
        conf.write_text(json.dumps(cfg))
        assert cli.main(["gen-data", "--config", str(conf), "--images", str(images), "--out", str(tmp_path / "gen"), "--jobs", "1"]) == 0
        full = cli.load_config(str(conf))
        mcfg = cli.model_config(full)
        assert (mcfg.d_model, mcfg.n_layers, mcfg.n_heads) == (64, 2, 4)
        manifest = m3.Manifest.read(tmp_path / "gen" / "manifest.jsonl")
        assert len(manifest) == 8 and all(r.category == "m3" for r in manifest.records)
        samples = train.load_samples(manifest, tmp_path / "gen", model.Codec(mcfg.latent_factor, mcfg.codec_seed))
        st = train.new_state(mcfg, full["train"], config=full)
        t0 = time.perf_counter()
        losses = train.run_training(st, samples, full["train"], max_steps=A7_STEPS)
        elapsed = time.perf_counter() - t0
        final = float(np.mean(losses[-50:]))
        ratio = final / losses[0]
        notes.append(f"step0={losses[0]:.4f} final(mean of last 50)={final:.4f} ratio={ratio:.3f} target<=0.1 time={elapsed:.0f}s")
        assert elapsed < 600
        assert ratio <= 0.1


# ------------------------------------------------------------- A8


def test_a8_metric_closed_forms():
    with criterion("A8", "metric closed forms") as notes:
        f = np.full((8, 8), 0.5)
        _, p = metrics.mse_psnr(f, f + 0.1, f - 0.1)
        assert abs(p - 20.0) <= 1e-9
        two = np.zeros((4, 4))
        two[:, 2:] = 1.0
        assert metrics.entropy(two) == 1.0
        board = (np.indices((8, 8)).sum(0) % 2).astype(float)
        assert abs(metrics.spatial_frequency(board) - np.sqrt(2)) <= 1e-12
        assert abs(metrics.average_gradient(board) - 1.0) <= 1e-12
        rng = np.random.default_rng(8)
        for _ in range(50):
            k = int(rng.integers(2, 5))
            shape = tuple(int(v) for v in rng.integers(2, 10, size=2))
            preds = [rng.integers(0, k, size=shape) for _ in range(3)]
            gts = [rng.integers(0, k, size=shape) for _ in range(3)]
            conf = np.zeros((k, k), dtype=np.int64)
            for pr, gt in zip(preds, gts):
                np.add.at(conf, (gt.ravel(), pr.ravel()), 1)
            want = {c: conf[c, c] / (conf[c].sum() + conf[:, c].sum() - conf[c, c]) for c in range(k) if conf[c].sum() + conf[:, c].sum()}
            assert metrics.miou(preds, gts, range(k)).per_class == want
        notes.append(f"psnr={p:.12f}")


# ------------------------------------------------------------- A9


def masks_with(extra=0, keep=100):
    gt = np.zeros(400, dtype=bool)
    gt[:100] = True
    pred = np.zeros(400, dtype=bool)
    pred[:keep] = True
    pred[100 : 100 + extra] = True
    return gt.reshape(20, 20), pred.reshape(20, 20)


def test_a9_judge_protocol():
    with criterion("A9", "judge thresholds and ratios") as notes:
        assert judge.stub_judge(*masks_with(extra=30)) == (False, True, False)
        assert judge.stub_judge(*masks_with(keep=79)) == (True, False, False)
        assert judge.stub_judge(*masks_with(extra=19)) == (True, True, True)
        rng = np.random.default_rng(9)
        vs = [judge.Verdict(f"{k:02d}", "x", *(bool(v) for v in rng.integers(0, 2, 3))) for k in range(25)]
        rep = judge.aggregate_ratios(vs)
        hand = [sum(1 for v in vs if getattr(v, f)) / 25 for f in ("precision_ok", "recall_ok", "iou_ok")]
        assert [rep.p_ratio, rep.r_ratio, rep.i_ratio] == hand
        items, gts = [], {}
        for k in range(16):
            img = smooth_image(rng, 16) * 0.5
            gt = rng.random((16, 16)) < 0.4
            gt[0, 0] = True
            pred = gt if k % 2 else rng.random((16, 16)) < 0.4
            items.append(judge.JudgeItem(f"s{k:02d}", img, imaging.overlay_mask(img, pred), "thing"))
            gts[f"s{k:02d}"] = gt
        backend = judge.StubBackend(gts)
        reference = judge.judge_many(backend, items, max_in_flight=1)
        for width in (2, 4, 8):
            shuffled = [items[i] for i in rng.permutation(len(items))]
            assert judge.judge_many(backend, shuffled, max_in_flight=width) == reference
        assert judge.aggregate_ratios(reference) == judge.aggregate_ratios(list(reversed(reference)))
        notes.append(f"ratios={rep.p_ratio:.2f}/{rep.r_ratio:.2f}/{rep.i_ratio:.2f} n=25")


# ------------------------------------------------------------- A10


def test_a10_persistence(tmp_path):
    with criterion("A10", "checkpoint, resume and manifest determinism") as notes:
        cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, lora_rank=2)
        tc = {"lr": 1e-3, "batch": 3, "epochs": 100, "seed": 1, "trainable": "full"}
        samples = tiny_samples(cfg, 7, 1)
        st = train.new_state(cfg, tc)
        train.run_training(st, samples, tc, max_steps=5)
        train.save_checkpoint(st, tmp_path / "a.ckpt")
        train.save_checkpoint(train.load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        resumed = train.load_checkpoint(tmp_path / "a.ckpt")
        tail = train.run_training(resumed, samples, tc, max_steps=15)
        straight = train.new_state(cfg, tc)
        losses = train.run_training(straight, samples, tc, max_steps=15)
        assert tail == losses[5:]
        assert train.checkpoint_bytes(resumed) == train.checkpoint_bytes(straight)
        pools = {c: [f"img{k}.png" for k in range(6)] for c in m3.CATEGORIES}
        m3.mix_manifest(pools, m3.DEFAULT_WEIGHTS, 300, seed=4).write(tmp_path / "m1.jsonl")
        m3.mix_manifest(pools, m3.DEFAULT_WEIGHTS, 300, seed=4).write(tmp_path / "m2.jsonl")
        assert (tmp_path / "m1.jsonl").read_bytes() == (tmp_path / "m2.jsonl").read_bytes()
        notes.append(f"checkpoint {len((tmp_path / 'a.ckpt').read_bytes())} bytes, 10 resumed steps loss-exact")


# ------------------------------------------------------------- A11


def random_instruction(rng):
    alphabet = list("abcdefghijklmnopqrstuvwxyz ABCXYZ0123456789.,!?-+'\"()éñ中文") + ["<", ">", "[", "]", "|"]
    while True:
        s = "".join(rng.choice(alphabet, size=int(rng.integers(0, 40)))).strip()
        if P._SPECIAL_RE.search(s) is None:
            return s


def test_a11_prompt_grammar(tmp_path):
    with criterion("A11", "prompt grammar") as notes:
        rng = np.random.default_rng(11)
        valid = 0
        for task, sub in all_tag_pairs():
            for _ in range(3):
                ast = P.PromptAST(task, sub, random_instruction(rng))
                try:
                    s = P.render_prompt(ast)
                except P.InvalidTagCombination:
                    continue
                valid += 1
                assert P.parse_prompt(s) == ast
        pairs = all_tag_pairs()
        for _ in range(500):
            task, sub = pairs[int(rng.integers(len(pairs)))]
            ast = P.PromptAST(task, sub, random_instruction(rng))
            try:
                s = P.render_prompt(ast)
            except P.InvalidTagCombination:
                continue
            assert P.parse_prompt(s) == ast
            assert P.detokenize(P.tokenize(s)) == s
        cfg = ModelConfig(d_model=16, n_layers=1, n_heads=2, lora_rank=2)
        train.save_checkpoint(train.new_state(cfg, {"trainable": "lora"}), tmp_path / "m.ckpt")
        for k in range(2):
            imaging.save_png(smooth_image(rng, 16), tmp_path / f"{k}.png")
        base = ["fuse", "--ckpt", str(tmp_path / "m.ckpt"), "--image-a", str(tmp_path / "0.png"), "--image-b", str(tmp_path / "1.png"), "--steps", "2"]
        free = "Fuse the images and increase the brightness."
        assert cli.main(base + ["--prompt", f"{SLOTS} {free}", "--out", str(tmp_path / "a.png")]) == 0
        assert cli.main(base + ["--prompt", free, "--template", "base", "--out", str(tmp_path / "b.png")]) == 0
        assert imaging.load_png(tmp_path / "a.png").shape == (16, 16, 3)
        notes.append(f"{valid} tag-space prompts, 500 random instructions, tag-free fuse ok")
