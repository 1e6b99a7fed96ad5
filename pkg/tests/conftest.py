import os
from pathlib import Path

import pytest

FIXTURE_DIR = Path(__file__).parent / "fixtures"
SAWTOOTH_CHECKPOINT = FIXTURE_DIR / "sawtooth_desk.npz"


@pytest.fixture(scope="session")
def sawtooth_model():
    """Desk-budget sawtooth CNP shared by the acceptance criteria.

    The checked-in checkpoint is the bit-reproducible output of the seeded
    recipe in ``arcnp.experiments.SAWTOOTH_DESK_BUDGET`` (~25 CPU-minutes).
    Set ``ARCNP_TRAIN_ACCEPTANCE=1`` to retrain from scratch instead of
    loading it; the freshly trained model replaces the cached file.
    """
    from arcnp.experiments import SAWTOOTH_DESK_BUDGET, train_sawtooth_cnp
    from arcnp.neural import load_checkpoint, save_checkpoint

    retrain = os.environ.get("ARCNP_TRAIN_ACCEPTANCE") == "1"
    if not retrain and SAWTOOTH_CHECKPOINT.exists():
        model, _ = load_checkpoint(SAWTOOTH_CHECKPOINT)
        return model
    model = train_sawtooth_cnp(dict(SAWTOOTH_DESK_BUDGET))
    FIXTURE_DIR.mkdir(exist_ok=True)
    save_checkpoint(SAWTOOTH_CHECKPOINT, model,
                    metadata={"recipe": "arcnp.experiments.SAWTOOTH_DESK_BUDGET"})
    return model


@pytest.fixture(scope="session")
def acceptance_log():
    lines = []
    yield lines
    print()
    for line in lines:
        print(line)


def record(lines, criterion: str, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    line = f"[acceptance] {criterion}: {status} ({detail})"
    lines.append(line)
    print(line)
