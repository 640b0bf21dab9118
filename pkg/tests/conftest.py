import json

import numpy as np
import pytest

from mmfuse import kernels
from mmfuse._jit import HAVE_NUMBA

BACKENDS = ["numpy", "numba"] if HAVE_NUMBA else ["numpy"]


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run a test once per kernel implementation."""
    monkeypatch.setattr(kernels, "USE_JIT", request.param == "numba")
    return request.param


def numeric_grad(f, params, eps=1e-4):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``params``."""
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + eps
            fp = f()
            arr[idx] = old - eps
            fm = f()
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * eps)
        grads[name] = g
    return grads


def max_rel_error(analytic, numeric, floor=1e-6):
    """Largest ``|a - n| / max(|a| + |n|, floor)`` over all parameters.

    The floor keeps round-off on gradients that are exactly zero (a key bias
    under softmax, for one) from reading as a large relative error.
    """
    worst = 0.0
    for name in numeric:
        a, n = analytic[name], numeric[name]
        denom = np.maximum(np.abs(a) + np.abs(n), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def record(uid, split="train", text="hello", audio="a.wav", video="v.mp4", emotion=0, sentiment=1, **kw):
    d = {
        "utterance_id": uid,
        "dialogue_id": "d1",
        "speaker": "Ross",
        "text": text,
        "audio_ref": audio,
        "video_ref": video,
        "emotion_label": emotion,
        "sentiment_label": sentiment,
        "split": split,
    }
    d.update(kw)
    return d


def jsonl(*records):
    return "".join(json.dumps(r) + "\n" for r in records)


@pytest.fixture
def small_manifest_text():
    return jsonl(
        record("u1", "train", text="a"),
        record("u2", "dev", text="b", audio=None),
        record("u3", "test", text="c", emotion=6, sentiment=2),
    )


# ------------------------------------------------------------ acceptance summary

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def acceptance(criterion: str, passed: bool, detail: str) -> None:
    """Record one acceptance line, echo it, then assert it."""
    ACCEPTANCE_RESULTS.append((criterion, bool(passed), detail))
    print(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
    assert passed, f"{criterion}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
