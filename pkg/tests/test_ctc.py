import itertools

import numpy as np
import pytest

from asrlab import autograd as ag
from asrlab import ctc
from asrlab.autograd import Tensor
from asrlab.ctc import CtcInfeasibleError


def random_lattice(t, v, seed):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(t, v))
    raw -= np.log(np.exp(raw - raw.max(axis=1, keepdims=True)).sum(axis=1, keepdims=True))
    raw -= raw.max(axis=1, keepdims=True) * 0  # keep as-is; normalize below
    lse = np.log(np.exp(raw).sum(axis=1, keepdims=True))
    return raw - lse


class TestCollapse:
    def test_repeats_then_blanks(self):
        assert ctc.collapse([1, 1, 0, 2, 2]) == (1, 2)

    def test_all_blank(self):
        assert ctc.collapse([0, 0, 0]) == ()

    def test_blank_separates_repeats(self):
        assert ctc.collapse([1, 0, 1]) == (1, 1)


class TestCtcLoss:
    def test_hand_computed_uniform_case(self):
        # T=2, vocab {blank, a}, p=0.5 everywhere, target "a":
        # paths (a,a), (a,-), (-,a), each 0.25 -> -ln 0.75
        lattice = Tensor(np.full((2, 2), np.log(0.5)), requires_grad=True)
        loss = ctc.ctc_loss(lattice, [1])
        assert loss.item() == pytest.approx(-np.log(0.75), abs=1e-10)

    def test_hand_case_matches_brute_force(self):
        lattice = np.full((2, 2), np.log(0.5))
        oracle = ctc.ctc_brute_force(lattice, [1])
        loss = ctc.ctc_loss(Tensor(lattice), [1]).item()
        assert loss == pytest.approx(oracle, abs=1e-10)

    def test_empty_target_is_all_blank_path(self):
        lattice = random_lattice(5, 3, seed=1)
        loss = ctc.ctc_loss(Tensor(lattice), [])
        assert loss.item() == pytest.approx(-lattice[:, 0].sum(), abs=1e-10)

    def test_infeasible_rejected_with_details(self):
        lattice = Tensor(random_lattice(1, 3, seed=2))
        with pytest.raises(CtcInfeasibleError, match="frames=1.*length=2"):
            ctc.ctc_loss(lattice, [1, 2])

    def test_repeat_needs_separator_frame(self):
        lattice = Tensor(random_lattice(2, 3, seed=3))
        with pytest.raises(CtcInfeasibleError, match="repeats=1"):
            ctc.ctc_loss(lattice, [1, 1])

    def test_oracle_equivalence_200_random_instances(self):
        rng = np.random.default_rng(42)
        checked = 0
        trial = 0
        while checked < 200:
            trial += 1
            t = int(rng.integers(1, 7))
            v = int(rng.integers(2, 5))
            ell = int(rng.integers(0, 4))
            target = list(rng.integers(1, v, size=ell))
            lattice = random_lattice(t, v, seed=trial)
            need = len(target) + sum(a == b for a, b in zip(target, target[1:]))
            if need > t:
                continue
            dp = ctc.ctc_loss(Tensor(lattice), target).item()
            oracle = ctc.ctc_brute_force(lattice, target)
            assert dp == pytest.approx(oracle, abs=1e-8), f"trial {trial}"
            checked += 1

    def test_gradient_finite_differences(self):
        target = [1, 2, 1]
        for trial in range(5):
            lattice = random_lattice(6, 4, seed=100 + trial)
            rep = ag.finite_difference_check(
                lambda x: ctc.ctc_loss(ag.log_softmax(x, axis=-1), target),
                Tensor(lattice),
                tolerance=1e-4,
            )
            assert rep.passed, rep.max_rel_error

    def test_permutation_covariance(self):
        # relabeling non-blank symbols consistently leaves the loss unchanged
        lattice = random_lattice(5, 4, seed=9)
        target = [1, 3, 2]
        perm = {1: 2, 2: 3, 3: 1}
        permuted = lattice.copy()
        for src, dst in perm.items():
            permuted[:, dst] = lattice[:, src]
        a = ctc.ctc_loss(Tensor(lattice), target).item()
        b = ctc.ctc_loss(Tensor(permuted), [perm[x] for x in target]).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_batch_mean_reduction(self):
        lattices = [random_lattice(5, 4, seed=s) for s in (1, 2, 3)]
        targets = [[1], [2, 3], []]
        batch = Tensor(np.stack(lattices))
        batched = ctc.ctc_loss_batch(batch, [5, 5, 5], targets).item()
        singles = [ctc.ctc_loss(Tensor(l), t).item() for l, t in zip(lattices, targets)]
        assert batched == pytest.approx(np.mean(singles), abs=1e-12)


class TestBruteForce:
    def test_completeness_partition(self):
        # summing p(target) over every possible target must give 1
        lattice = random_lattice(3, 3, seed=5)
        total = 0.0
        targets = set()
        for path in itertools.product(range(3), repeat=3):
            targets.add(ctc.collapse(path))
        for target in targets:
            total += np.exp(-ctc.ctc_brute_force(lattice, list(target)))
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_too_large_rejected(self):
        with pytest.raises(ValueError, match="too large"):
            ctc.ctc_brute_force(np.zeros((9, 2)), [1])

    def test_impossible_target(self):
        with pytest.raises(CtcInfeasibleError):
            ctc.ctc_brute_force(random_lattice(2, 3, seed=6), [1, 2, 1])


class TestGreedy:
    def lattice_for(self, frame_ids, v=3):
        out = np.full((len(frame_ids), v), np.log(0.1))
        for t, c in enumerate(frame_ids):
            out[t, c] = np.log(0.8)
        lse = np.log(np.exp(out).sum(axis=1, keepdims=True))
        return out - lse

    def test_collapse_rule(self):
        hyp = ctc.greedy_decode(self.lattice_for([1, 1, 0, 2, 2]))
        assert hyp.ids == [1, 2]
        assert hyp.kind == "greedy"
        assert hyp.score <= 0

    def test_all_blank(self):
        hyp = ctc.greedy_decode(self.lattice_for([0, 0, 0]))
        assert hyp.ids == []

    def test_blank_separated_repeat(self):
        hyp = ctc.greedy_decode(self.lattice_for([1, 0, 1]))
        assert hyp.ids == [1, 1]

    def test_no_adjacent_duplicates_property(self):
        rng = np.random.default_rng(8)
        for trial in range(50):
            lattice = random_lattice(int(rng.integers(2, 10)), 4, seed=500 + trial)
            hyp = ctc.greedy_decode(lattice)
            assert 0 not in hyp.ids
            frame_ids = lattice.argmax(axis=1)
            # adjacent equal ids in the output imply a blank separator in the path
            assert list(ctc.collapse(frame_ids)) == hyp.ids


class TestPrefixBeam:
    def test_one_hot_lattice_forced_transcript(self):
        path = [1, 1, 0, 2, 0, 3]
        lattice = np.full((6, 4), -1e9)
        for t, c in enumerate(path):
            lattice[t, c] = 0.0
        hyps = ctc.prefix_beam_decode(lattice, beam_width=4)
        assert hyps[0].ids == [1, 2, 3]
        assert hyps[0].score == pytest.approx(0.0, abs=1e-6)

    def test_beam_width_validated(self):
        with pytest.raises(ValueError):
            ctc.prefix_beam_decode(np.zeros((2, 2)), beam_width=0)

    def test_scores_sorted_and_nonpositive(self):
        lattice = random_lattice(5, 4, seed=7)
        hyps = ctc.prefix_beam_decode(lattice, beam_width=8)
        scores = [h.score for h in hyps]
        assert scores == sorted(scores, reverse=True)
        assert all(s <= 1e-9 for s in scores)

    def test_top_beam_beats_greedy_transcript_probability(self):
        for trial in range(100):
            lattice = random_lattice(5, 4, seed=1000 + trial)
            top = ctc.prefix_beam_decode(lattice, beam_width=24)[0]
            greedy = ctc.greedy_decode(lattice)
            try:
                greedy_true = -ctc.ctc_brute_force(lattice, greedy.ids)
            except CtcInfeasibleError:
                continue
            top_true = -ctc.ctc_brute_force(lattice, top.ids)
            assert top_true >= greedy_true - 1e-9

    def test_recovers_map_transcript(self):
        hits = 0
        for trial in range(100):
            rng = np.random.default_rng(2000 + trial)
            t = int(rng.integers(2, 7))
            v = int(rng.integers(2, 5))
            lattice = random_lattice(t, v, seed=3000 + trial)
            targets = {ctc.collapse(p) for p in itertools.product(range(v), repeat=t)}
            best = min(targets, key=lambda tg: ctc.ctc_brute_force(lattice, list(tg)))
            top = ctc.prefix_beam_decode(lattice, beam_width=16)[0]
            if tuple(top.ids) == best:
                hits += 1
        assert hits >= 95
