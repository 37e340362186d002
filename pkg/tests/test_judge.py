import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ditfuse import judge
from ditfuse.imaging import overlay_mask


def block_mask(n_gt=100, extra=0, keep=None, size=20):
    """gt is the first ``n_gt`` pixels in raster order; pred keeps ``keep`` of them and adds ``extra`` more."""
    flat_gt = np.zeros(size * size, dtype=bool)
    flat_gt[:n_gt] = True
    flat_pred = np.zeros_like(flat_gt)
    flat_pred[: n_gt if keep is None else keep] = True
    flat_pred[n_gt : n_gt + extra] = True
    return flat_gt.reshape(size, size), flat_pred.reshape(size, size)


def test_stub_examples():
    gt, pred = block_mask()
    assert judge.stub_judge(gt, pred) == (True, True, True)
    assert judge.stub_judge(gt, ~gt) == (False, False, False)


@pytest.mark.parametrize(
    "extra, keep, want",
    [
        (30, None, (False, True, False)),  # 130% of gt: error 30/130, IoU 1/1.3
        (0, 79, (True, False, False)),  # 79% coverage, IoU 0.79
        (19, None, (True, True, True)),  # 119%: error 19/119, IoU 100/119
    ],
)
def test_stub_boundary_cases(extra, keep, want):
    gt, pred = block_mask(extra=extra, keep=keep)
    assert judge.stub_judge(gt, pred) == want


def test_stub_exact_thresholds():
    gt, pred = block_mask(keep=80)
    assert judge.stub_judge(gt, pred) == (True, True, True)
    gt, pred = block_mask(extra=25)  # error exactly 25/125 = 0.2, IoU exactly 0.8
    assert judge.stub_judge(gt, pred) == (True, True, True)


def test_stub_errors():
    with pytest.raises(judge.DegenerateGT):
        judge.stub_judge(np.zeros((3, 3)), np.ones((3, 3)))
    assert judge.stub_judge(np.ones((3, 3)), np.zeros((3, 3))) == (False, False, False)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 150), st.integers(0, 150), st.integers(0, 100))
def test_stub_monotone_in_overlap(n_gt, keep, extra):
    keep = min(keep, n_gt - 1) if n_gt > 1 else 0
    gt, small = block_mask(n_gt, extra=extra, keep=keep)
    _, big = block_mask(n_gt, extra=extra, keep=keep + 1)
    a, b = judge.stub_judge(gt, small), judge.stub_judge(gt, big)
    assert b[1] >= a[1] and b[2] >= a[2]


def random_verdicts(rng, n):
    return [judge.Verdict(f"id{k:03d}", "x", *map(bool, rng.integers(0, 2, 3))) for k in range(n)]


def test_aggregate_hand_count(rng):
    vs = random_verdicts(rng, 25)
    rep = judge.aggregate_ratios(vs)
    assert rep.n == 25
    assert rep.p_ratio == len([v for v in vs if v.precision_ok]) / 25
    assert rep.r_ratio == len([v for v in vs if v.recall_ok]) / 25
    assert rep.i_ratio == len([v for v in vs if v.iou_ok]) / 25
    for _ in range(10):
        perm = [vs[i] for i in rng.permutation(25)]
        assert judge.aggregate_ratios(perm) == rep


def test_aggregate_examples():
    assert judge.aggregate_ratios([judge.Verdict(str(k), "x", True, True, True) for k in range(10)]) == judge.RatioReport(1.0, 1.0, 1.0, 10)
    vs = [judge.Verdict(str(k), "x", k < 7, False, False) for k in range(10)]
    assert judge.aggregate_ratios(vs).p_ratio == 0.7
    with pytest.raises(judge.EmptyVerdictList):
        judge.aggregate_ratios([])


def make_items(rng, n=12, size=16):
    items, gts = [], {}
    for k in range(n):
        img = rng.random((size, size, 3)) * 0.5
        gt = rng.random((size, size)) < 0.4
        gt[0, 0] = True
        pred = gt.copy() if k % 3 else rng.random((size, size)) < 0.4
        sid = f"s{k:02d}"
        items.append(judge.JudgeItem(sid, img, overlay_mask(img, pred), "thing"))
        gts[sid] = gt
    return items, gts


def test_judge_sample_with_overlay(rng):
    img = rng.random((16, 16, 3)) * 0.5
    gt, pred = block_mask(size=16, extra=30)
    v = judge.judge_sample(judge.StubBackend(gt), img, overlay_mask(img, pred), "thing", "k")
    assert v == judge.Verdict("k", "thing", False, True, False)
    v = judge.judge_sample(judge.StubBackend(gt), img, overlay_mask(img, gt), "thing", "k")
    assert v == judge.Verdict("k", "thing", True, True, True)


class SlowStub(judge.StubBackend):
    def ask(self, item, question):
        time.sleep(0.001 * (hash(item.id) % 5))
        return super().ask(item, question)


def test_concurrent_judging_is_order_independent(rng):
    items, gts = make_items(rng)
    backend = SlowStub(gts)
    serial = judge.judge_many(backend, items, max_in_flight=1)
    for k in (2, 4, 8):
        shuffled = [items[i] for i in rng.permutation(len(items))]
        assert judge.judge_many(backend, shuffled, max_in_flight=k) == serial
    assert [v.id for v in serial] == sorted(v.id for v in serial)
    assert any(v.iou_ok for v in serial) and not all(v.iou_ok for v in serial)


class NonBool:
    def ask(self, item, question):
        return "yes"


def test_non_boolean_answer_rejected(rng):
    img = rng.random((4, 4, 3))
    with pytest.raises(judge.BackendMalformedReply):
        judge.judge_sample(NonBool(), img, img, "x")


# ------------------------------------------------------------- HTTP backend


class Handler(BaseHTTPRequestHandler):
    mode = "ok"
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        Handler.seen.append((self.headers.get("Authorization"), body))
        if Handler.mode == "slow":
            time.sleep(0.5)
        if Handler.mode == "forbidden":
            self.send_response(403)
            self.end_headers()
            return
        reply = b"not json" if Handler.mode == "garbage" else json.dumps({"answer": body["question"] != "iou"}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        try:
            self.wfile.write(reply)
        except BrokenPipeError:  # the client already gave up
            pass

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    Handler.seen = []
    Handler.mode = "ok"
    yield f"http://127.0.0.1:{srv.server_address[1]}/judge"
    srv.shutdown()
    srv.server_close()


def test_http_backend_roundtrip(server, rng):
    img = rng.random((8, 8, 3))
    backend = judge.HttpJudgeBackend(server, timeout=5, token="secret")
    v = judge.judge_sample(backend, img, img, "cat", "a")
    assert (v.precision_ok, v.recall_ok, v.iou_ok) == (True, True, False)
    assert [b["question"] for _, b in Handler.seen] == list(judge.QUESTIONS)
    auth, body = Handler.seen[0]
    assert auth == "Bearer secret"
    assert set(body) == {"fused_png_b64", "seg_png_b64", "label", "question"}
    assert body["label"] == "cat"


def test_http_backend_token_from_env(server, rng, monkeypatch):
    monkeypatch.setenv(judge.TOKEN_ENV, "fromenv")
    img = rng.random((4, 4, 3))
    judge.HttpJudgeBackend(server).ask(judge.JudgeItem("a", img, img, "x"), "recall")
    assert Handler.seen[0][0] == "Bearer fromenv"


def test_http_backend_malformed(server, rng):
    Handler.mode = "garbage"
    img = rng.random((4, 4, 3))
    with pytest.raises(judge.BackendMalformedReply):
        judge.HttpJudgeBackend(server, retries=3, backoff=0).ask(judge.JudgeItem("a", img, img, "x"), "recall")
    assert len(Handler.seen) == 1


def test_http_backend_client_error_not_retried(server, rng):
    Handler.mode = "forbidden"
    img = rng.random((4, 4, 3))
    with pytest.raises(judge.BackendUnavailable):
        judge.HttpJudgeBackend(server, retries=3, backoff=0).ask(judge.JudgeItem("a", img, img, "x"), "recall")
    assert len(Handler.seen) == 1


def test_http_backend_timeout_retries_bounded(server, rng):
    Handler.mode = "slow"
    img = rng.random((4, 4, 3))
    with pytest.raises(judge.BackendTimeout):
        judge.HttpJudgeBackend(server, timeout=0.1, retries=2, backoff=0).ask(judge.JudgeItem("a", img, img, "x"), "recall")
    assert len(Handler.seen) == 3


def test_http_backend_unreachable(rng):
    img = rng.random((4, 4, 3))
    backend = judge.HttpJudgeBackend("http://127.0.0.1:9/judge", timeout=1, retries=1, backoff=0)
    with pytest.raises(judge.BackendUnavailable):
        judge.judge_many(backend, [judge.JudgeItem("a", img, img, "x")])
    with pytest.raises(ValueError):
        judge.HttpJudgeBackend("http://x", retries=4)
