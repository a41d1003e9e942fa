import itertools

import numpy as np
import pytest

from decnas import data
from decnas.data import ClientDataset, Federation, Samples


def make_federation(label_lists, class_count=8, hw=1, rng=None):
    """Federation whose client ``i`` holds exactly ``label_lists[i]`` (features random or zero)."""
    clients = []
    for cid, labels in enumerate(label_lists):
        y = np.asarray(labels, dtype=np.int64)
        if rng is None:
            x = np.zeros((len(y), hw, hw, 1), np.float32)
        else:
            x = rng.normal(size=(len(y), hw, hw, 1)).astype(np.float32)
        s = Samples(x, y)
        n = len(y)
        n_train, n_val, _ = data.split_sizes(n) if n >= 5 else (n, 0, 0)
        clients.append(ClientDataset(cid, s.take(range(n_train)), s.take(range(n_train, n_train + n_val)),
                                     s.take(range(n_train + n_val, n)), data.distribution_vector(y, class_count)))
    return Federation(tuple(clients), class_count)


def random_skew_federation(rng, n, class_count=8, size_range=(5, 40)):
    labels = []
    for size in rng.integers(*size_range, size=n):
        cls = rng.choice(class_count, 2, replace=False)
        labels.append(rng.choice(cls, size=size).tolist())
    return make_federation(labels, class_count)


def integer_params_like(arch, rng):
    """Small-integer weights: every partial sum is exact, so summation order cannot matter."""
    base = data_free_init(arch)
    return base.map(lambda a: rng.integers(-3, 4, size=a.shape).astype(np.float64))


def data_free_init(arch):
    from decnas import nn

    return nn.init_params(arch, 0, dtype=np.float64)


def brute_force_mean_distance(federation, k, r):
    """Lowest mean distance over every balance-feasible assignment, or None."""
    sizes = np.array([c.size for c in federation.clients], dtype=np.float64)
    counts = np.array([c.distribution * c.size for c in federation.clients])
    global_v = counts.sum(axis=0) / sizes.sum()
    assign = np.array(list(itertools.product(range(k), repeat=len(sizes))))
    onehot = (assign[:, :, None] == np.arange(k)).astype(np.float64)
    group_counts = np.einsum("pnk,nm->pkm", onehot, counts)
    group_sizes = group_counts.sum(axis=-1)
    ok = (group_sizes.min(axis=1) > 0) & (group_sizes.max(axis=1) <= r * group_sizes.min(axis=1))
    if not ok.any():
        return None
    v = group_counts / np.maximum(group_sizes, 1e-300)[..., None]
    dist = np.abs(v - global_v).sum(axis=-1).mean(axis=1)
    return float(dist[ok].min())


@pytest.fixture
def fed_factory():
    return make_federation


# ------------------------------------------------------------------ acceptance summary lines


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    detail = dict(rep.user_properties).get("detail", "")
    if rep.passed:
        verdict = "PASS"
    elif hasattr(rep, "wasxfail"):
        verdict = "FAIL (known, marked xfail)"
    else:
        verdict = "FAIL"
    item.config._criteria[number] = (title, verdict, detail)


def pytest_terminal_summary(terminalreporter, config):
    if not config._criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(config._criteria):
        title, verdict, detail = config._criteria[number]
        line = f"criterion {number}: {verdict}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
