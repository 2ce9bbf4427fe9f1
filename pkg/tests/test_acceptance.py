"""End-to-end acceptance checks, one test per criterion.

Criteria 4-7 share one desk training run (plus one ablated retrain for 7),
trained once per session. Each pass/fail line is also collected and printed
in the terminal summary.
"""

import pytest

from phed import acceptance as acc


RESULTS = {}


def _report(result):
    RESULTS[result.number] = result
    print(result.line())
    assert result.passed, result.line()


@pytest.fixture(scope="session")
def work_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def desk(work_dir):
    return acc.DeskRun(work_dir / "desk").train()


@pytest.fixture(scope="session")
def ablated(desk, work_dir):
    base = desk.run_dir / "checkpoints" / "phase0_final.ckpt"
    return acc.DeskRun(work_dir / "desk_no_cls", acc.desk_config(drop_cls=True), init_from=base).train()


def test_criterion_01_gradient_check():
    _report(acc.criterion_1())


def test_criterion_02_kl_monte_carlo():
    _report(acc.criterion_2())


def test_criterion_03_loss_oracles():
    _report(acc.criterion_3())


def test_criterion_04_freezing(desk):
    _report(acc.criterion_4(desk))


def test_criterion_05_training_health(desk):
    _report(acc.criterion_5(desk))


def test_criterion_06_attribute_control(desk):
    _report(acc.criterion_6(desk))


def test_criterion_07_ablation_direction(desk, ablated):
    _report(acc.criterion_7(desk, ablated))


def test_criterion_08_beam_exactness():
    _report(acc.criterion_8())


def test_criterion_09_metric_oracles():
    _report(acc.criterion_9())


def test_criterion_10_determinism(work_dir):
    _report(acc.criterion_10(work_dir))
