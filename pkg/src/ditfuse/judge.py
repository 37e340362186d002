"""Three-question binary segmentation judging with ratio aggregation.

Each sample is asked, in order: precision (is there little wrong content
inside the segmented region), recall (is most of the target captured) and
iou (is the contour accurate). Backends answer one boolean per question.
The stub backend answers from ground-truth masks with exact integer
thresholds; the HTTP backend forwards the images to a remote judge.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import os
import socket
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np
from PIL import Image

from ditfuse import imaging

logger = logging.getLogger(__name__)

QUESTIONS = ("precision", "recall", "iou")
TOKEN_ENV = "DITFUSE_JUDGE_TOKEN"


class JudgeError(RuntimeError):
    pass


class BackendTimeout(JudgeError):
    pass


class BackendMalformedReply(JudgeError):
    pass


class BackendUnavailable(JudgeError):
    pass


class DegenerateGT(ValueError):
    pass


class EmptyVerdictList(ValueError):
    pass


@dataclass(frozen=True)
class Verdict:
    id: str
    label: str
    precision_ok: bool
    recall_ok: bool
    iou_ok: bool


@dataclass(frozen=True)
class RatioReport:
    p_ratio: float
    r_ratio: float
    i_ratio: float
    n: int


@dataclass(frozen=True)
class JudgeItem:
    id: str
    fused: np.ndarray
    segmented: np.ndarray
    label: str


class JudgeBackend(Protocol):
    def ask(self, item: JudgeItem, question: str) -> bool: ...


def stub_judge(gt_mask, pred_mask) -> tuple[bool, bool, bool]:
    """Threshold oracle: wrong area <= 20% of pred, coverage >= 80% of gt, IoU >= 80%.

    Integer arithmetic keeps the boundaries exact.
    """
    gt = np.asarray(gt_mask, dtype=bool)
    pred = np.asarray(pred_mask, dtype=bool)
    if gt.shape != pred.shape:
        raise imaging.ShapeMismatch(f"mask shapes differ: {gt.shape} vs {pred.shape}")
    n_gt = int(np.count_nonzero(gt))
    if n_gt == 0:
        raise DegenerateGT("ground-truth mask is empty")
    n_pred = int(np.count_nonzero(pred))
    inter = int(np.count_nonzero(gt & pred))
    union = n_gt + n_pred - inter
    precision_ok = n_pred > 0 and 5 * (n_pred - inter) <= n_pred
    recall_ok = 5 * inter >= 4 * n_gt
    iou_ok = 5 * inter >= 4 * union
    return precision_ok, recall_ok, iou_ok


class StubBackend:
    """Answers from ground truth: the predicted mask is recovered from the overlay.

    ``gt`` is either one mask used for every item or a mapping from sample id to mask.
    """

    def __init__(self, gt, tol: float = 1e-3):
        self.gt = gt
        self.tol = tol

    def _gt_for(self, item: JudgeItem) -> np.ndarray:
        if isinstance(self.gt, Mapping):
            return self.gt[item.id]
        return self.gt

    def ask(self, item: JudgeItem, question: str) -> bool:
        if question not in QUESTIONS:
            raise ValueError(f"unknown question {question!r}")
        pred = imaging.recover_mask(item.segmented, item.fused, tol=self.tol)
        return stub_judge(self._gt_for(item), pred)[QUESTIONS.index(question)]


def png_b64(img) -> str:
    buf = io.BytesIO()
    Image.fromarray(imaging.to_uint8(img)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class HttpJudgeBackend:
    """POSTs ``{fused_png_b64, seg_png_b64, label, question}`` and expects ``{"answer": bool}``.

    Timeouts and connection failures are retried up to ``retries`` times;
    a malformed reply is not retried. The bearer token comes from
    ``DITFUSE_JUDGE_TOKEN`` when set.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 3, backoff: float = 0.5, token: str | None = None):
        if not 0 <= retries <= 3:
            raise ValueError("retries must lie in [0, 3]")
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.token = token if token is not None else os.environ.get(TOKEN_ENV)

    def _request(self, payload: dict) -> urllib.request.Request:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        return urllib.request.Request(self.endpoint, data=json.dumps(payload).encode("utf-8"), headers=headers, method="POST")

    def ask(self, item: JudgeItem, question: str) -> bool:
        payload = {
            "fused_png_b64": png_b64(item.fused),
            "seg_png_b64": png_b64(item.segmented),
            "label": item.label,
            "question": question,
        }
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with urllib.request.urlopen(self._request(payload), timeout=self.timeout) as resp:
                    body = resp.read()
            except (socket.timeout, TimeoutError) as exc:
                last = BackendTimeout(f"{self.endpoint} timed out after {self.timeout}s")
                last.__cause__ = exc
                continue
            except urllib.error.HTTPError as exc:
                if exc.code < 500:
                    raise BackendUnavailable(f"{self.endpoint} answered HTTP {exc.code}") from exc
                last = BackendUnavailable(f"{self.endpoint} answered HTTP {exc.code}")
                continue
            except urllib.error.URLError as exc:
                if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                    last = BackendTimeout(f"{self.endpoint} timed out after {self.timeout}s")
                else:
                    last = BackendUnavailable(f"{self.endpoint} unreachable: {exc.reason}")
                continue
            return _parse_answer(body)
        logger.warning("judge request for %s/%s failed after %d attempts", item.id, question, self.retries + 1)
        assert last is not None
        raise last


def _parse_answer(body: bytes) -> bool:
    try:
        reply = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BackendMalformedReply("reply is not JSON") from exc
    if not isinstance(reply, dict) or not isinstance(reply.get("answer"), bool):
        raise BackendMalformedReply(f"reply lacks a boolean 'answer': {reply!r}")
    return reply["answer"]


def judge_sample(backend: JudgeBackend, fused, segmented, label: str, sample_id: str = "") -> Verdict:
    fused = imaging.as_image(fused)
    segmented = imaging.as_image(segmented)
    if fused.shape != segmented.shape:
        raise imaging.ShapeMismatch(f"fused {fused.shape} vs segmented {segmented.shape}")
    item = JudgeItem(sample_id, fused, segmented, label)
    answers = [backend.ask(item, q) for q in QUESTIONS]
    for q, a in zip(QUESTIONS, answers):
        if not isinstance(a, (bool, np.bool_)):
            raise BackendMalformedReply(f"{q}: non-boolean answer {a!r}")
    return Verdict(sample_id, label, *(bool(a) for a in answers))


def judge_many(backend: JudgeBackend, items: Sequence[JudgeItem], max_in_flight: int = 4) -> list[Verdict]:
    """Judge every item with at most ``max_in_flight`` concurrent samples; result sorted by id.

    Any backend failure propagates; no partial list is returned.
    """
    if max_in_flight < 1:
        raise ValueError("max_in_flight must be >= 1")

    def one(it: JudgeItem) -> Verdict:
        return judge_sample(backend, it.fused, it.segmented, it.label, it.id)

    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        verdicts = list(pool.map(one, items))
    return sorted(verdicts, key=lambda v: v.id)


def aggregate_ratios(verdicts: Sequence[Verdict]) -> RatioReport:
    n = len(verdicts)
    if n == 0:
        raise EmptyVerdictList("no verdicts to aggregate")
    return RatioReport(
        p_ratio=sum(v.precision_ok for v in verdicts) / n,
        r_ratio=sum(v.recall_ok for v in verdicts) / n,
        i_ratio=sum(v.iou_ok for v in verdicts) / n,
        n=n,
    )
