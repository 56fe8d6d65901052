"""Interaction-log ingestion, k-core filtering, leave-one-out splitting, batch
sampling, and a synthetic multi-domain Markov-chain generator with a
controllable source-target similarity knob."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class DomainDataset:
    domain_id: str
    item_count: int
    train: list          # per user: list of item ids (chronological prefix)
    val: list            # per user: validation item
    test: list           # per user: test item
    dropped_users: int = 0

    @property
    def num_users(self):
        return len(self.train)

    @property
    def pad_id(self):
        return self.item_count

    def full_sequence(self, user):
        return self.train[user] + [self.val[user], self.test[user]]


@dataclass
class TaskBatch:
    domain_id: str
    inputs: np.ndarray   # (B, T) item-id windows, left-padded with pad_id
    targets: np.ndarray  # (B,) next-item ids


@dataclass(frozen=True)
class SyntheticSpec:
    num_source_domains: int = 3
    items_per_domain: int = 64
    users_per_domain: int = 2000
    seq_len_min: int = 8
    seq_len_max: int = 16
    rho: float = 0.9     # shared-structure strength in [0, 1]
    seed: int = 0


@dataclass
class SyntheticResult:
    datasets: list                   # M sources then the target, in order
    base_matrix: np.ndarray
    domain_matrices: dict            # domain id -> transition matrix
    permutations: dict               # domain id -> relabeling of the base chain
    events: dict = field(default_factory=dict)  # domain id -> raw event list


def load_interactions(path):
    """Parse a TSV of "domain<TAB>user<TAB>item<TAB>timestamp" lines.

    Returns domain -> list of (user_id, item_id, timestamp) with tags mapped to
    dense integer ids per domain in first-appearance order, sorted by timestamp
    (stable on ties). '#' comment lines and blank lines are skipped.
    """
    per_domain = {}
    user_ids = {}
    item_ids = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, "
                                 f"got {len(fields)}")
            domain, user, item, ts = fields
            try:
                ts = int(ts)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-integer timestamp {ts!r}") from None
            users = user_ids.setdefault(domain, {})
            items = item_ids.setdefault(domain, {})
            uid = users.setdefault(user, len(users))
            iid = items.setdefault(item, len(items))
            per_domain.setdefault(domain, []).append((uid, iid, ts))
    for events in per_domain.values():
        events.sort(key=lambda e: e[2])  # stable: file order preserved on ties
    return per_domain


def k_core_filter(events, k):
    """Iteratively drop users/items with < k interactions until a fixed point."""
    if k < 1:
        raise ValueError(f"k_core_filter: k must be >= 1, got {k}")
    kept = list(events)
    while True:
        user_counts = {}
        item_counts = {}
        for u, i, _ in kept:
            user_counts[u] = user_counts.get(u, 0) + 1
            item_counts[i] = item_counts.get(i, 0) + 1
        bad_users = {u for u, c in user_counts.items() if c < k}
        bad_items = {i for i, c in item_counts.items() if c < k}
        if not bad_users and not bad_items:
            return kept
        kept = [e for e in kept if e[0] not in bad_users and e[1] not in bad_items]


def leave_one_out_split(domain_id, events):
    """Build a DomainDataset: last item is test, second-to-last validation.

    Sequences shorter than 3 are dropped and counted. Item ids are remapped to
    a dense [0, |I|) space in first-appearance order over kept sequences.
    """
    by_user = {}
    for u, i, ts in events:
        by_user.setdefault(u, []).append(i)
    item_map = {}
    train, val, test = [], [], []
    dropped = 0
    for u in sorted(by_user):
        seq = by_user[u]
        if len(seq) < 3:
            dropped += 1
            continue
        dense = [item_map.setdefault(i, len(item_map)) for i in seq]
        train.append(dense[:-2])
        val.append(dense[-2])
        test.append(dense[-1])
    return DomainDataset(domain_id=domain_id, item_count=len(item_map),
                         train=train, val=val, test=test, dropped_users=dropped)


def build_domain_dataset(domain_id, events, k):
    return leave_one_out_split(domain_id, k_core_filter(events, k))


def _window(seq, max_len, pad_id):
    w = seq[-max_len:]
    return [pad_id] * (max_len - len(w)) + w


def sample_batch(dataset, split, batch_size, max_len, rng):
    """Uniform-with-replacement user sampling into a (window, target) batch.

    Train windows cut at a random position inside the train prefix; val/test
    windows are the full preceding prefix with the held-out item as target.
    """
    users = dataset.num_users
    if users == 0:
        raise ValueError(f"sample_batch: empty dataset {dataset.domain_id}")
    pad = dataset.pad_id
    inputs = np.empty((batch_size, max_len), dtype=np.int64)
    targets = np.empty(batch_size, dtype=np.int64)
    if split == "train":
        eligible = [u for u in range(users) if len(dataset.train[u]) >= 2]
        if not eligible:
            raise ValueError(f"sample_batch: no train pairs in {dataset.domain_id}")
        for b in range(batch_size):
            u = eligible[int(rng.integers(len(eligible)))]
            seq = dataset.train[u]
            cut = int(rng.integers(1, len(seq)))
            inputs[b] = _window(seq[:cut], max_len, pad)
            targets[b] = seq[cut]
    elif split in ("val", "test"):
        for b in range(batch_size):
            u = int(rng.integers(users))
            prefix = dataset.train[u] if split == "val" \
                else dataset.train[u] + [dataset.val[u]]
            inputs[b] = _window(prefix, max_len, pad)
            targets[b] = dataset.val[u] if split == "val" else dataset.test[u]
    else:
        raise ValueError(f"sample_batch: unknown split {split!r}")
    return TaskBatch(domain_id=dataset.domain_id, inputs=inputs, targets=targets)


def eval_batch(dataset, split, max_len):
    """All users of a split, user-id ascending, as one batch."""
    if split not in ("val", "test"):
        raise ValueError(f"eval_batch: unknown split {split!r}")
    if dataset.num_users == 0:
        raise ValueError(f"eval_batch: empty dataset {dataset.domain_id}")
    pad = dataset.pad_id
    inputs = np.empty((dataset.num_users, max_len), dtype=np.int64)
    targets = np.empty(dataset.num_users, dtype=np.int64)
    for u in range(dataset.num_users):
        prefix = dataset.train[u] if split == "val" else dataset.train[u] + [dataset.val[u]]
        inputs[u] = _window(prefix, max_len, pad)
        targets[u] = dataset.val[u] if split == "val" else dataset.test[u]
    return TaskBatch(domain_id=dataset.domain_id, inputs=inputs, targets=targets)


def _random_transition(rng, n):
    m = rng.uniform(0.05, 1.0, (n, n))
    return m / m.sum(axis=1, keepdims=True)


def generate_synthetic(spec):
    """M source domains plus one target, sampled from blended Markov chains.

    Each domain's transition matrix is rho * (permuted base) + (1 - rho) *
    (fresh random matrix), row-normalized; the target gets an order of
    magnitude fewer users than each source. Item-id spaces are domain-local by
    construction.
    """
    if not 0.0 <= spec.rho <= 1.0:
        raise ValueError(f"generate_synthetic: rho must be in [0, 1], got {spec.rho}")
    rng = np.random.default_rng(spec.seed)
    n = spec.items_per_domain
    base = _random_transition(rng, n)
    domains = [f"src{i}" for i in range(spec.num_source_domains)] + ["target"]
    result = SyntheticResult(datasets=[], base_matrix=base,
                             domain_matrices={}, permutations={})
    for domain in domains:
        perm = rng.permutation(n)
        relabeled = base[np.ix_(perm, perm)]
        fresh = _random_transition(rng, n)
        mat = spec.rho * relabeled + (1.0 - spec.rho) * fresh
        mat = mat / mat.sum(axis=1, keepdims=True)
        result.domain_matrices[domain] = mat
        result.permutations[domain] = perm
        users = spec.users_per_domain if domain != "target" \
            else max(1, spec.users_per_domain // 10)
        cum = np.cumsum(mat, axis=1)
        events = []
        for u in range(users):
            length = int(rng.integers(spec.seq_len_min, spec.seq_len_max + 1))
            item = int(rng.integers(n))
            for t in range(length):
                events.append((u, item, t))
                item = int(np.searchsorted(cum[item], rng.random(), side="right"))
        result.events[domain] = events
        result.datasets.append(leave_one_out_split(domain, events))
    return result


def write_domain_tsv(path, domain, events):
    """Serialize one domain's events to the shared TSV input format."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# domain {domain}\n")
        for u, i, ts in events:
            fh.write(f"{domain}\tu{u}\ti{i}\t{ts}\n")
