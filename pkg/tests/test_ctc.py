import itertools
import math

import numpy as np
import pytest

from blrmoe import numerics as nx
from blrmoe.ctc import (
    ctc_greedy_decode,
    ctc_loss,
    ctc_loss_batch,
    greedy_path_collapse,
    min_frames,
)
from blrmoe.errors import InfeasibleAlignmentError
from blrmoe.numerics import Tensor


def random_log_probs(rng, T, V):
    return nx.log_softmax(Tensor(rng.normal(size=(T, V)))).data


def brute_force_nll(lp, target):
    """Sum path probabilities over all V**T frame labelings that collapse to target."""
    T, V = lp.shape
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if greedy_path_collapse(path) == list(target):
            total += math.exp(sum(lp[t, k] for t, k in enumerate(path)))
    return -math.log(total) if total > 0 else math.inf


def test_single_frame():
    lp = random_log_probs(np.random.default_rng(0), 1, 3)
    assert ctc_loss(Tensor(lp), [2]).item() == pytest.approx(-lp[0, 2], abs=1e-14)


def test_two_frames_three_alignments():
    lp = random_log_probs(np.random.default_rng(1), 2, 3)
    p = np.exp(lp)
    a = 1
    expected = -math.log(p[0, a] * p[1, a] + p[0, a] * p[1, 0] + p[0, 0] * p[1, a])
    assert ctc_loss(Tensor(lp), [a]).item() == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("T", [1, 2, 3, 4])
@pytest.mark.parametrize("V", [2, 3])
def test_matches_exhaustive_enumeration(T, V):
    rng = np.random.default_rng(10 * T + V)
    lp = random_log_probs(rng, T, V)
    for L in range(3):
        for target in itertools.product(range(1, V), repeat=L):
            oracle = brute_force_nll(lp, target)
            if math.isinf(oracle):
                with pytest.raises(InfeasibleAlignmentError):
                    ctc_loss(Tensor(lp), target)
            else:
                assert abs(ctc_loss(Tensor(lp), target).item() - oracle) < 1e-10


@pytest.mark.parametrize("T", [1, 2, 3, 4])
def test_total_probability_over_all_targets(T):
    V = 3
    lp = random_log_probs(np.random.default_rng(T), T, V)
    total = 0.0
    for L in range(T + 1):
        for target in itertools.product(range(1, V), repeat=L):
            if min_frames(target) <= T:
                total += math.exp(-ctc_loss(Tensor(lp), target).item())
    assert abs(total - 1.0) < 1e-8


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(2, 6))
    V = int(rng.integers(2, 5))
    L = int(rng.integers(1, 3))
    target = list(rng.integers(1, V, size=L))
    while min_frames(target) > T:
        target = target[:-1]
    x = Tensor(rng.normal(size=(T, V)))
    assert nx.gradcheck(lambda x: ctc_loss(nx.log_softmax(x), target), [x]) < 1e-4


def test_batched_equals_individual_with_padding():
    rng = np.random.default_rng(3)
    lengths = [5, 3, 4]
    targets = [[1, 2], [3], [2, 2]]
    lp = nx.log_softmax(Tensor(rng.normal(size=(3, 5, 4)))).data
    batched = ctc_loss_batch(Tensor(lp), targets, lengths).data
    for b in range(3):
        single = ctc_loss(Tensor(lp[b, :lengths[b]]), targets[b]).item()
        assert batched[b] == pytest.approx(single, abs=1e-12)


def test_infeasible_target_raises():
    lp = random_log_probs(np.random.default_rng(0), 2, 3)
    with pytest.raises(InfeasibleAlignmentError):
        ctc_loss(Tensor(lp), [1, 1])  # repeat needs a separating blank: 3 frames
    with pytest.raises(InfeasibleAlignmentError):
        ctc_loss(Tensor(lp), [1, 2, 1])


def _one_hot_path(path, V=3):
    lp = np.full((len(path), V), -5.0)
    lp[np.arange(len(path)), path] = 0.0
    return lp


@pytest.mark.parametrize("path, expected", [
    ([1, 1, 0, 1], [1, 1]),
    ([0, 0], []),
    ([1, 2, 2, 0, 2], [1, 2, 2]),
])
def test_greedy_decode_collapse(path, expected):
    assert ctc_greedy_decode(_one_hot_path(path)) == expected


def test_greedy_decode_invariant_to_row_rescaling():
    rng = np.random.default_rng(0)
    probs = np.exp(random_log_probs(rng, 7, 4))
    scaled = probs * rng.uniform(0.1, 10, size=(7, 1))
    assert ctc_greedy_decode(np.log(probs)) == ctc_greedy_decode(np.log(scaled))
