import pytest

from mmaseg.config import TrainConfig
from mmaseg.scenes import Dataset, default_config

TINY = dict(
    sa_npoints=(64, 32, 16, 8),
    sa_nsample=(4, 4, 4, 4),
    sa_widths=(8, 8, 8, 8),
    fp_width=8,
    d_u=8,
    d_student=8,
    n_heads=2,
    batch_size=2,
    eval_every=2,
)


def tiny_config(**kw) -> TrainConfig:
    return TrainConfig(**{**TINY, **kw})


@pytest.fixture(scope="session")
def tiny_data():
    return Dataset.generate(5, 4, 2, default_config(n_points=512))


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")
