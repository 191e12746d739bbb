"""Seeded synthetic telemetry with planted malware behavior signatures.

Every interval draws its randomness from a Philox stream keyed by
(seed, org, user) with the bucket index in the counter, so one user's stream
does not depend on which other users are generated or in which order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .telemetry import BUCKET_SECONDS, IntervalRecord, Label

# Detector families the named events come from; kept as metadata only.
DETECTOR_CATEGORIES = ("signature", "classifier", "anomaly", "contextual")

NAMED_EVENTS = {
    "unexpected application": "classifier",
    "information stealer": "signature",
    "suspicious domain from dynamic DNS": "signature",
    "anomalous destination": "anomaly",
    "dga": "classifier",
    "non-user activity": "anomaly",
    "inconsistent user time activity": "anomaly",
    "cryptomining": "signature",
    "http to IP address": "contextual",
    "advertisement": "classifier",
    "file download": "contextual",
    "repetitive requests": "anomaly",
    "multimedia streaming": "classifier",
}

UNIVERSE_SIZE = 216
DEFAULT_START_TS = 1590969600  # 2020-06-01T00:00:00Z


def default_universe(size: int = UNIVERSE_SIZE) -> list[str]:
    """The named events plus generic fillers spread over the detector families."""
    names = list(NAMED_EVENTS)
    i = 0
    while len(names) < size:
        cat = DETECTOR_CATEGORIES[i % len(DETECTOR_CATEGORIES)]
        names.append(f"{cat} event {i // len(DETECTOR_CATEGORIES) + 1:03d}")
        i += 1
    return names[:size]


def event_category(name: str) -> str:
    if name in NAMED_EVENTS:
        return NAMED_EVENTS[name]
    head = name.split(" ", 1)[0]
    return head if head in DETECTOR_CATEGORIES else "unknown"


@dataclass(frozen=True)
class BehaviorProfile:
    name: str
    taxonomy: Label = field(default_factory=Label)
    signature_events: tuple = ()
    background_rate: float = 1.0
    sent_model: tuple = (8.0, 2.0)
    recv_model: tuple = (8.0, 2.0)
    gap_p: float = 0.3

    def __post_init__(self):
        for ev, p in self.signature_events:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"profile {self.name}: probability {p} for {ev!r} outside [0, 1]")
        for mu, sigma in (self.sent_model, self.recv_model):
            if sigma <= 0:
                raise ValueError(f"profile {self.name}: log-normal sigma must be > 0")
        if self.background_rate < 0:
            raise ValueError(f"profile {self.name}: background_rate must be >= 0")
        if not 0.0 < self.gap_p <= 1.0:
            raise ValueError(f"profile {self.name}: gap_p must be in (0, 1]")
        if self.expected_events() <= 0:
            raise ValueError(f"profile {self.name}: expected events per interval must be > 0")

    def expected_events(self) -> float:
        return sum(p for _, p in self.signature_events) + self.background_rate

    @property
    def signature_names(self) -> list[str]:
        return [e for e, _ in self.signature_events]

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "taxonomy": self.taxonomy.to_json(),
            "signature_events": [[e, p] for e, p in self.signature_events],
            "background_rate": self.background_rate,
            "sent_model": list(self.sent_model),
            "recv_model": list(self.recv_model),
            "gap_p": self.gap_p,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BehaviorProfile":
        return cls(
            name=obj["name"],
            taxonomy=Label(**obj.get("taxonomy", {})),
            signature_events=tuple((e, float(p)) for e, p in obj.get("signature_events", [])),
            background_rate=float(obj.get("background_rate", 1.0)),
            sent_model=tuple(obj.get("sent_model", (8.0, 2.0))),
            recv_model=tuple(obj.get("recv_model", (8.0, 2.0))),
            gap_p=float(obj.get("gap_p", 0.3)),
        )


def _sig(names, p):
    return tuple((n, p) for n in names)


# Event memberships follow the indicators reported for each family; the
# probabilities, rates and byte models are generator settings.
FAMILY_SIGNATURES = {
    "njRAT": ["unexpected application", "information stealer",
              "suspicious domain from dynamic DNS", "anomalous destination"],
    "WannaCry": ["dga", "non-user activity", "anomalous destination",
                 "inconsistent user time activity", "cryptomining", "http to IP address"],
    "ArcadeYum": ["advertisement", "file download", "repetitive requests"],
    "Malicious Android firmware": ["information stealer", "suspicious domain from dynamic DNS",
                                   "multimedia streaming", "repetitive requests",
                                   "non-user activity", "dga"],
}

FAMILY_TAXONOMY = {
    "njRAT": Label("njrat-bladabindi", "njRAT", "Information stealer"),
    "WannaCry": Label("wannacry-killswitch", "WannaCry", "Ransomware"),
    "ArcadeYum": Label("arcadeyum-adware", "ArcadeYum", "Potentially unwanted application"),
    "Malicious Android firmware": Label("android-fw-stealer", "Malicious Android firmware",
                                        "Information stealer"),
}


def default_profiles(signature_p: float = 0.8, background_rate: float = 0.3) -> list[BehaviorProfile]:
    """Four malware profiles followed by one benign profile."""
    out = [BehaviorProfile(name, FAMILY_TAXONOMY[name], _sig(events, signature_p),
                           background_rate=background_rate)
           for name, events in FAMILY_SIGNATURES.items()]
    out.append(benign_profile())
    return out


def benign_profile(background_rate: float = 1.6) -> BehaviorProfile:
    # benign composition is invented: uniform noise over the whole universe
    return BehaviorProfile("benign", Label(), (), background_rate=background_rate)


@dataclass
class ScenarioConfig:
    profiles: list  # of (BehaviorProfile, user count)
    benign_profile: BehaviorProfile = field(default_factory=benign_profile)
    benign_users: int = 0
    n_orgs: int = 1
    duration: int = 288
    seed: int = 0
    overlap: float = 0.0
    universe: list = field(default_factory=default_universe)
    start_ts: int = DEFAULT_START_TS

    def __post_init__(self):
        if self.duration < 1:
            raise ValueError("duration must be >= 1 bucket")
        if self.n_orgs < 1:
            raise ValueError("n_orgs must be >= 1")
        if self.benign_users < 0 or any(n < 0 for _, n in self.profiles):
            raise ValueError("user counts must be >= 0")
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must be in [0, 1]")
        if self.start_ts % BUCKET_SECONDS:
            raise ValueError("start_ts must be a multiple of 300")

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=int(seed))

    def to_json(self) -> dict:
        return {
            "profiles": [{"profile": p.to_json(), "users": n} for p, n in self.profiles],
            "benign_profile": self.benign_profile.to_json(),
            "benign_users": self.benign_users,
            "n_orgs": self.n_orgs,
            "duration": self.duration,
            "seed": self.seed,
            "overlap": self.overlap,
            "start_ts": self.start_ts,
            "universe": list(self.universe),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ScenarioConfig":
        """Profiles may be inline objects or names of the shipped defaults."""
        defaults = {p.name: p for p in default_profiles(
            float(obj.get("signature_p", 0.8)), float(obj.get("malware_background_rate", 0.3)))}
        profiles = []
        for entry in obj.get("profiles", []):
            prof = entry["profile"]
            if isinstance(prof, str):
                if prof not in defaults:
                    raise ValueError(f"unknown shipped profile {prof!r}")
                prof = defaults[prof]
            else:
                prof = BehaviorProfile.from_json(prof)
            profiles.append((prof, int(entry["users"])))
        benign = obj.get("benign_profile", "benign")
        benign = defaults["benign"] if benign == "benign" else BehaviorProfile.from_json(benign)
        return cls(
            profiles=profiles,
            benign_profile=benign,
            benign_users=int(obj.get("benign_users", 0)),
            n_orgs=int(obj.get("n_orgs", 1)),
            duration=int(obj.get("duration", 288)),
            seed=int(obj.get("seed", 0)),
            overlap=float(obj.get("overlap", 0.0)),
            universe=list(obj.get("universe") or default_universe()),
            start_ts=int(obj.get("start_ts", DEFAULT_START_TS)),
        )

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


DEFAULT_OVERLAP = 0.3


def default_scenario(seed: int = 7, users_per_family: int = 10, benign_users: int = 40,
                     signature_p: float = 0.8, overlap: float = DEFAULT_OVERLAP,
                     duration: int = 288, n_orgs: int = 4) -> ScenarioConfig:
    """The shipped four-family scenario."""
    profs = default_profiles(signature_p)
    return ScenarioConfig(
        profiles=[(p, users_per_family) for p in profs[:-1]],
        benign_profile=profs[-1],
        benign_users=benign_users,
        n_orgs=n_orgs,
        duration=duration,
        seed=seed,
        overlap=overlap,
    )


class _Universe:
    def __init__(self, names):
        self.names = list(names)
        self.index = {n: i for i, n in enumerate(self.names)}

    def resolve(self, profile: BehaviorProfile) -> np.ndarray:
        ids = []
        for ev, _ in profile.signature_events:
            if ev not in self.index:
                raise ValueError(f"profile {profile.name}: event {ev!r} not in the declared universe")
            ids.append(self.index[ev])
        return np.array(ids, dtype=np.int64)


def _user_key(seed: int, org: int, user: int) -> np.ndarray:
    ss = np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1), spawn_key=(org, user))
    return ss.generate_state(2, dtype=np.uint64)


def _bucket_rng(key: np.ndarray, bucket: int) -> np.random.Generator:
    counter = np.array([0, 0, bucket + 1, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def _draw_events(rng, sig_ids, sig_p, rate, n_universe) -> list[int]:
    for _ in range(10_000):
        chosen = set(sig_ids[rng.random(len(sig_ids)) < sig_p].tolist()) if len(sig_ids) else set()
        k = rng.poisson(rate) if rate > 0 else 0
        if k:
            chosen.update(rng.choice(n_universe, size=min(k, n_universe), replace=False).tolist())
        if chosen:
            return sorted(chosen)
    raise RuntimeError("could not draw a non-empty event set")


def _user_stream(cfg: ScenarioConfig, uni: _Universe, org: int, user: int,
                 profile: BehaviorProfile, infected: bool) -> Iterator[IntervalRecord]:
    key = _user_key(cfg.seed, org, user)
    start_rng = _bucket_rng(key, -1)
    bucket = int(start_rng.integers(0, max(1, cfg.duration // 10)))
    plans = [(profile, uni.resolve(profile),
              np.array([p for _, p in profile.signature_events]))]
    benign = cfg.benign_profile
    plans.append((benign, uni.resolve(benign), np.array([p for _, p in benign.signature_events])))
    label = profile.taxonomy if infected else None
    org_id, user_id = f"org{org:02d}", f"user{user:04d}"
    while bucket < cfg.duration:
        rng = _bucket_rng(key, bucket)
        diluted = infected and cfg.overlap > 0 and rng.random() < cfg.overlap
        prof, sig_ids, sig_p = plans[1] if diluted else plans[0]
        ev = _draw_events(rng, sig_ids, sig_p, prof.background_rate, len(uni.names))
        sent = int(rng.lognormal(*prof.sent_model))
        recv = int(rng.lognormal(*prof.recv_model))
        yield IntervalRecord(org_id, user_id, cfg.start_ts + bucket * BUCKET_SECONDS,
                             tuple(sorted(uni.names[i] for i in ev)), sent, recv, label)
        bucket += int(rng.geometric(profile.gap_p))


def generate(cfg: ScenarioConfig) -> list[IntervalRecord]:
    """All intervals of the scenario, ordered by (org, user, ts)."""
    uni = _Universe(cfg.universe)
    for prof, _ in cfg.profiles:
        uni.resolve(prof)
    uni.resolve(cfg.benign_profile)
    users = []
    for prof, n in cfg.profiles:
        users += [(prof, True)] * n
    users += [(cfg.benign_profile, False)] * cfg.benign_users
    records = []
    for u, (prof, infected) in enumerate(users):
        org = u % cfg.n_orgs
        records.extend(_user_stream(cfg, uni, org, u, prof, infected and not prof.taxonomy.is_empty()))
    records.sort(key=lambda r: (r.org_id, r.user_id, r.ts))
    return records
