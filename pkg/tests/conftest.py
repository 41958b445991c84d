import numpy as np
import pytest

from quacklab.attention import AttentionConfig
from quacklab.config import RunConfig
from quacklab.model import ModelConfig


def small_model_config(variant="mha", qk_norm=False, **kw):
    attn = AttentionConfig(variant=variant, d_model=16, n_head=2, d_head=8, d_nope=4, d_rope=4,
                           d_cq=8, d_ckv=8, qk_norm_enabled=qk_norm)
    base = dict(vocab_size=13, d_model=16, d_ff=32, n_layer=2, context_length=16,
                attention=attn)
    base.update(kw)
    return ModelConfig(**base)


def small_run_config(**kw):
    base = dict(vocab_size=32, d_model=16, n_head=2, d_head=8, d_nope=4, d_rope=4, d_cq=8,
                d_ckv=8, context_length=16, seq_len=16, batch_size=2, steps=12,
                warmup_steps=3, corpus_length=2000, probe_interval=3, probe_batch_size=2)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[int, str] = {}


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
