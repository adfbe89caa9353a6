import logging

import pytest

from stdf4d.config import desk_defaults
from stdf4d.stdf import FieldConfig
from stdf4d.synth import SynthSpec, build, write_dataset

TINY_SPEC = SynthSpec(n_gaussians=8, frames=3, n_input_cams=2, n_gen_cams=3, n_eval_cams=2, width=16, height=16)
TINY_FIELD = FieldConfig(spatial_res=6, scales=(1, 2), channels=4, hidden=8, depth=2)


def tiny_config(iters=12, **changes):
    cfg = desk_defaults(iters).variant(field_config=TINY_FIELD)
    return cfg.variant(**changes) if changes else cfg


@pytest.fixture(scope="session")
def tiny_dataset():
    return build(TINY_SPEC)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    write_dataset(build(TINY_SPEC), root)
    return root


@pytest.fixture(autouse=True)
def _quiet_densify():
    # the clone-budget warning fires every densify step on tiny scenes
    logging.getLogger("stdf4d.gauss4d").setLevel(logging.ERROR)
    yield


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
