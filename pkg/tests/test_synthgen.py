import io

import numpy as np
import pytest

from iocseq import synthgen
from iocseq.synthgen import (BehaviorProfile, ScenarioConfig, default_profiles, default_scenario,
                             generate)
from iocseq.telemetry import BUCKET_SECONDS, Label, build_vocabulary, parse_log, windowize, write_log


def _dump(records) -> bytes:
    buf = io.StringIO()
    write_log(records, buf)
    return buf.getvalue().encode()


def test_same_seed_is_byte_identical():
    cfg = default_scenario(seed=3, users_per_family=2, benign_users=2, duration=60)
    assert _dump(generate(cfg)) == _dump(generate(cfg))


def test_different_seed_differs():
    cfg = default_scenario(seed=3, users_per_family=2, benign_users=2, duration=60)
    assert _dump(generate(cfg)) != _dump(generate(cfg.with_seed(4)))


def test_user_stream_independent_of_other_users():
    small = default_scenario(seed=5, users_per_family=1, benign_users=0, duration=50)
    big = default_scenario(seed=5, users_per_family=1, benign_users=5, duration=50)
    first = [r for r in generate(small) if r.user_id == "user0000"]
    assert first == [r for r in generate(big) if r.user_id == "user0000"]


def test_degenerate_profile_emits_only_its_event():
    prof = BehaviorProfile("one", Label("t", "f", "c"), (("dga", 1.0),), background_rate=0.0)
    cfg = ScenarioConfig([(prof, 3)], duration=100, seed=1)
    recs = generate(cfg)
    assert recs and all(r.events == ("dga",) for r in recs)


def test_default_scenario_mean_events_per_interval():
    recs = generate(default_scenario(seed=7))
    mean = np.mean([len(r.events) for r in recs])
    assert 2.2 <= mean <= 3.2


def test_generated_records_are_valid_telemetry():
    recs = generate(default_scenario(seed=7, users_per_family=2, benign_users=2))
    again = parse_log(_dump(recs))
    assert again == recs
    for r in recs:
        assert r.events and r.ts % BUCKET_SECONDS == 0
        assert r.bytes_sent >= 0 and r.bytes_received >= 0


def test_infected_users_label_every_interval():
    recs = generate(default_scenario(seed=7, users_per_family=2, benign_users=3))
    by_user = {}
    for r in recs:
        by_user.setdefault(r.user_key, []).append(r.label)
    labelled = [labels for labels in by_user.values() if labels[0] is not None]
    assert len(labelled) == 8
    for labels in by_user.values():
        assert len(set(labels)) == 1


def test_default_profile_memberships():
    profs = {p.name: p for p in default_profiles()}
    assert "information stealer" in profs["njRAT"].signature_names
    assert "dga" in profs["WannaCry"].signature_names
    assert set(profs["ArcadeYum"].signature_names) == {
        "advertisement", "file download", "repetitive requests"}
    assert len(profs["Malicious Android firmware"].signature_names) == 6
    assert profs["benign"].taxonomy.is_empty()
    assert len(profs) == 5


def test_unresolvable_event_is_named():
    prof = BehaviorProfile("odd", Label(family="x"), (("no such event", 0.5),))
    with pytest.raises(ValueError, match="no such event"):
        generate(ScenarioConfig([(prof, 1)], duration=10))


def test_profile_validation():
    with pytest.raises(ValueError):
        BehaviorProfile("bad", Label(), (("dga", 1.5),))
    with pytest.raises(ValueError):
        BehaviorProfile("bad", Label(), (("dga", 0.5),), sent_model=(8.0, 0.0))
    with pytest.raises(ValueError):
        BehaviorProfile("bad", Label(), (), background_rate=0.0)


def test_scenario_json_roundtrip():
    cfg = default_scenario(seed=11, users_per_family=1, benign_users=1, duration=30)
    again = ScenarioConfig.from_json(cfg.to_json())
    assert _dump(generate(again)) == _dump(generate(cfg))


def test_scenario_json_accepts_shipped_profile_names():
    cfg = ScenarioConfig.from_json({"profiles": [{"profile": "WannaCry", "users": 2}],
                                    "benign_users": 1, "duration": 20, "seed": 2})
    assert cfg.profiles[0][0].name == "WannaCry"
    with pytest.raises(ValueError):
        ScenarioConfig.from_json({"profiles": [{"profile": "Nope", "users": 1}]})


def test_universe_has_216_events_and_resolves_all_signatures():
    uni = synthgen.default_universe()
    assert len(uni) == len(set(uni)) == 216
    for p in default_profiles():
        assert set(p.signature_names) <= set(uni)


def _count_vectors(records, vocab, w=21):
    X, y = [], []
    for win in windowize(records, vocab, w):
        if win.label is None:
            continue
        v = np.zeros(len(vocab.names))
        for step, real in zip(win.steps, win.pad_mask):
            if real:
                v[list(step.event_ids)] += 1
        X.append(v / max(win.n_real, 1))
        y.append(win.label.family)
    return np.array(X), np.array(y)


@pytest.mark.parametrize("background", [0.3, 3.0])
def test_nearest_centroid_separability(background):
    def scenario(seed):
        profs = default_profiles(signature_p=0.8, background_rate=background)
        return ScenarioConfig([(p, 4) for p in profs[:-1]], profs[-1], benign_users=0,
                              n_orgs=2, duration=200, seed=seed,
                              overlap=synthgen.DEFAULT_OVERLAP)

    vocab = build_vocabulary([synthgen.default_universe()])
    Xtr, ytr = _count_vectors(generate(scenario(1)), vocab)
    Xte, yte = _count_vectors(generate(scenario(2)), vocab)
    classes = sorted(set(ytr))
    assert len(classes) == 4
    centroids = np.stack([Xtr[ytr == c].mean(axis=0) for c in classes])
    dist = ((Xte[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    pred = np.array(classes)[dist.argmin(axis=1)]
    assert (pred == yte).mean() >= 0.90
