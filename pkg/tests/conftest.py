import pytest

from iocseq import synthgen
from iocseq.models import Model, make_config
from iocseq.telemetry import build_vocabulary
from iocseq.trainer import TrainConfig, labeled_windows, train


@pytest.fixture(scope="session")
def small_scenario():
    """A reduced four-family scenario: train and test data from different seeds."""
    vocab = build_vocabulary([synthgen.default_universe()])

    def data(seed):
        cfg = synthgen.default_scenario(seed=seed, users_per_family=3, benign_users=4, duration=150)
        return labeled_windows(synthgen.generate(cfg), vocab, "family")

    return vocab, data(1), data(2)


@pytest.fixture(scope="session")
def trained_transformer(small_scenario):
    vocab, train_data, _ = small_scenario
    classes = train_data.classes()
    model = Model(make_config("transformer", "desk", len(vocab.names), len(classes)), seed=0,
                  vocab=vocab)
    train(TrainConfig(epochs=10, seed=0, classes=classes), model, train_data)
    return model


ACCEPTANCE_RESULTS = {}


@pytest.fixture
def verdict(request):
    """record(criterion, passed, detail): kept for the end-of-run summary."""
    def record(criterion, passed, detail=""):
        ACCEPTANCE_RESULTS[criterion] = (bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE_RESULTS, key=lambda c: int(c.split()[-1])):
        passed, detail = ACCEPTANCE_RESULTS[crit]
        terminalreporter.write_line(f"{crit}: {'PASS' if passed else 'FAIL'}  {detail}")
