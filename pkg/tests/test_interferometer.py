import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ETA_IM, oracle_density, oracle_exclusive_total, oracle_mixed_density
from homlab import core, optics
from homlab import interferometer as itf
from homlab.core import BOSON, FERMION, Grid, InconsistentTableError, ValidationError, WaveFunction
from homlab.interferometer import OutcomeTable

seeds = st.integers(min_value=0, max_value=2**32 - 1)
stats = st.sampled_from([BOSON, FERMION])


def coincidence_mask(t):
    ports = np.array([lab.port for lab in t.labels])
    return (ports[:, None] != ports[None, :])[:, None, :, None] & np.ones((1, t.n, 1, t.n), bool)


class TestDetectionCoefficients:
    def test_balanced_bosons(self, grid8):
        ref = core.flat_reference(grid8)
        c = core.flat_amplitude(grid8)
        d = itf.detection_coefficients(optics.balanced_splitter(), ref, 1, 1, 2, 5, BOSON)
        assert d.a == pytest.approx(c / 2, abs=1e-15) and d.b == pytest.approx(c / 2, abs=1e-15)

    def test_fermion_same_point_vanishes(self, grid8):
        ref = core.flat_reference(grid8)
        psi = core.random_state(grid8, 1)
        d = itf.detection_coefficients(optics.balanced_splitter(), ref, 1, 1, 3, 3, FERMION)
        amp = np.conj(d.a) * psi.amplitudes[3] + np.conj(d.b) * psi.amplitudes[3]
        assert abs(amp) < 1e-16

    def test_identity_kills_branch(self, grid8):
        d = itf.detection_coefficients(optics.rotation(0.0), core.flat_reference(grid8), 1, 1, 0, 1, BOSON)
        assert d.a == 0

    def test_overlap_reproduces_table(self, grid8, statistics):
        u = optics.haar_transfer(4)
        ref, psi = core.random_state(grid8, 2), core.random_state(grid8, 3)
        t = itf.joint_probabilities_pure(u, psi, ref, statistics)
        for alpha, beta, i, j in [(1, 1, 0, 3), (1, 2, 5, 2), (2, 1, 4, 4), (2, 2, 7, 1)]:
            d = itf.detection_coefficients(u, ref, alpha, beta, i, j, statistics)
            overlap = np.conj(d.a) * psi.amplitudes[j] + np.conj(d.b) * psi.amplitudes[i]
            assert abs(abs(overlap) ** 2 - t.joint(alpha - 1, beta - 1)[i, j]) < 1e-15

    @pytest.mark.parametrize("args", [(3, 1, 0, 0), (1, 1, 8, 0), (1, 1, 0, -1)])
    def test_index_range(self, grid8, args):
        with pytest.raises(ValidationError):
            itf.detection_coefficients(optics.balanced_splitter(), core.flat_reference(grid8),
                                       *args, BOSON)


class TestPureTable:
    @given(seed=seeds, s=stats)
    @settings(max_examples=50)
    def test_matches_oracle(self, seed, s):
        g = Grid(6, -1, 1)
        u = optics.haar_transfer(seed)
        psi, ref = core.random_state(g, seed), core.random_state(g, seed + 1)
        t = itf.joint_probabilities_pure(u, psi, ref, s)
        expected = oracle_density(u.entries, psi.amplitudes, ref.amplitudes, s.sign)
        assert np.max(np.abs(t.density - expected)) < 1e-13

    def test_hom_bosons(self):
        g = Grid(32, -1, 1)
        psi = core.gaussian_state(g, 0.1, 0.3)
        t = itf.joint_probabilities_pure(optics.balanced_splitter(), psi, psi, BOSON)
        assert np.max(t.density[coincidence_mask(t)]) < 1e-12
        assert abs(itf.total_probability(t) - 1) < 1e-12

    def test_hom_fermions(self):
        g = Grid(32, -1, 1)
        psi = core.random_state(g, 9)
        t = itf.joint_probabilities_pure(optics.balanced_splitter(), psi, psi, FERMION)
        assert np.max(t.density[~coincidence_mask(t)]) < 1e-12

    def test_disjoint_support(self, grid8):
        left = np.r_[np.ones(4), np.zeros(4)] / 2
        psi_u = WaveFunction(grid8, left * np.exp(1j * np.arange(8)))
        psi_r = WaveFunction(grid8, left[::-1])
        u = optics.haar_transfer(1)
        tb = itf.joint_probabilities_pure(u, psi_u, psi_r, BOSON)
        tf = itf.joint_probabilities_pure(u, psi_u, psi_r, FERMION)
        assert tb.max_abs_difference(tf) < 1e-15

    def test_exclusive_key_order(self, grid8):
        t = itf.joint_probabilities_pure(optics.balanced_splitter(), core.random_state(grid8, 0),
                                         core.flat_reference(grid8), BOSON)
        keys = t.outcome_keys()
        assert keys.shape == (16 * 17 // 2, 4)
        slots = keys[:, 0] * 8 + keys[:, 1], keys[:, 2] * 8 + keys[:, 3]
        assert np.all(slots[0] <= slots[1])
        p = t.probabilities
        assert p[((core.ModeLabel(1), 2), (core.ModeLabel(2), 5))] == t.probability(0, 2, 1, 5)
        assert t.probability(1, 3, 1, 3) == t.density[1, 3, 1, 3] / 2

    def test_grid_mismatch(self, grid8):
        with pytest.raises(ValidationError):
            itf.joint_probabilities_pure(optics.balanced_splitter(), core.random_state(grid8, 0),
                                         core.flat_reference(Grid(8, 0, 1)), BOSON)

    def test_unnormalized(self, grid8):
        with pytest.raises(ValidationError, match="normalised"):
            itf.joint_probabilities_pure(optics.balanced_splitter(), WaveFunction(grid8, np.ones(8)),
                                         core.flat_reference(grid8), BOSON)

    @given(seed=seeds, s=stats)
    def test_conjugation_invariance(self, seed, s):
        g = Grid(6, -1, 1)
        u = optics.haar_transfer(seed)
        ref = core.gaussian_state(g, 0.2, 0.5)
        psi = core.random_state(g, seed)
        a = itf.joint_probabilities_pure(u, psi, ref, s)
        b = itf.joint_probabilities_pure(u, core.conjugate_state(psi), ref, s)
        assert a.max_abs_difference(b) < 1e-12

    @given(seed=seeds, s=stats)
    def test_swap_inputs_balanced(self, seed, s):
        # swapping inputs of the balanced splitter only flips the sign of output port 2
        g = Grid(6, -1, 1)
        u = optics.balanced_splitter()
        psi, ref = core.random_state(g, seed), core.random_state(g, seed + 7)
        a = itf.joint_probabilities_pure(u, psi, ref, s)
        b = itf.joint_probabilities_pure(u, ref, psi, s)
        assert a.max_abs_difference(b) < 1e-12


class TestMixedTable:
    @pytest.mark.parametrize("seed", range(100))
    def test_pure_consistency(self, seed):
        g = Grid(6, -1, 1)
        psi = core.random_state(g, seed)
        ref = core.random_state(g, seed + 1000)
        u = optics.haar_transfer(seed)
        s = BOSON if seed % 2 else FERMION
        a = itf.joint_probabilities_pure(u, psi, ref, s)
        b = itf.joint_probabilities_mixed(u, psi.projector(), ref, s)
        assert a.max_abs_difference(b) < 1e-13

    @given(seed=seeds, s=stats)
    @settings(max_examples=30)
    def test_matches_oracle(self, seed, s):
        g = Grid(5, -1, 1)
        rho = core.random_density(5, 1 + seed % 5, seed, grid=g)
        u = optics.lossy_tomography_matrix((seed % 97) / 96)
        ref = core.random_state(g, seed + 3)
        t = itf.joint_probabilities_mixed(u, rho, ref, s)
        expected = oracle_mixed_density(u.entries, rho.entries, ref.amplitudes, s.sign)
        assert np.max(np.abs(t.density - expected)) < 1e-13

    def test_maximally_mixed(self, grid8, statistics):
        t = itf.joint_probabilities_mixed(optics.balanced_splitter(), core.maximally_mixed(grid8),
                                          core.flat_reference(grid8), statistics)
        off = ~np.eye(8, dtype=bool)
        values = t.density.transpose(0, 2, 1, 3)[:, :, off]
        assert np.ptp(values) < 1e-12

    def test_real_part_difference(self, grid8, statistics):
        rho = core.random_density(8, 3, 5, grid=grid8)
        t = itf.joint_probabilities_mixed(optics.balanced_splitter(), rho,
                                          core.flat_reference(grid8), statistics)
        c2 = 1 / 8
        diff = t.joint(0, 0) - t.joint(0, 1)
        off = ~np.eye(8, dtype=bool)
        expected = statistics.sign * c2 * rho.entries.real
        assert np.max(np.abs(diff - expected)[off]) < 1e-15

    def test_rejects_unphysical(self, grid8):
        raw = core.DensityMatrix(grid8, np.zeros((8, 8)), physical=False)
        with pytest.raises(ValidationError):
            itf.joint_probabilities_mixed(optics.balanced_splitter(), raw, core.flat_reference(grid8), BOSON)

    def test_zero_density_override(self, grid8):
        raw = core.DensityMatrix(grid8, np.zeros((8, 8)), physical=False)
        t = itf.joint_probabilities_mixed(optics.balanced_splitter(), raw, core.flat_reference(grid8),
                                          BOSON, allow_unphysical=True)
        assert itf.total_probability(t) == 0.0


class TestPolarizedTable:
    def test_closed_forms(self, grid8, statistics):
        rho = core.random_density(8, 4, 21, grid=grid8)
        t = itf.joint_probabilities_polarized(rho, statistics)
        R = rho.entries
        d = np.real(np.diag(R))
        base = d[:, None] + d[None, :]
        c2 = 1 / 8
        s = statistics.sign
        closed = {
            ("1h", "1h"): base + 2 * s * R.real,
            ("1h", "2h"): base - 2 * s * R.real,
            ("1h", "2v"): base + 2 * s * R.imag,
            ("1h", "1v"): base - 2 * s * R.imag,
        }
        for (a, b), expected in closed.items():
            assert np.max(np.abs(t.joint(a, b) - c2 / 16 * expected)) < 1e-12

    @given(seed=seeds, s=stats)
    @settings(max_examples=30)
    def test_matches_four_mode_oracle(self, seed, s):
        g = Grid(5, -1, 1)
        rho = core.random_density(5, 1 + seed % 5, seed, grid=g)
        t = itf.joint_probabilities_polarized(rho, s)
        expected = oracle_mixed_density(optics.polarization_network().entries, rho.entries,
                                        core.flat_reference(g).amplitudes, s.sign,
                                        unknown=0, reference=2)
        assert np.max(np.abs(t.density - expected)) < 1e-12

    def test_maximally_mixed_equal_densities(self, grid8):
        t = itf.joint_probabilities_polarized(core.maximally_mixed(grid8), BOSON)
        off = ~np.eye(8, dtype=bool)
        blocks = [t.joint("1h", b)[off] for b in ("1h", "2h", "2v", "1v")]
        assert np.max(np.ptp(np.array(blocks), axis=0)) < 1e-12

    def test_normalized(self, grid8, statistics):
        t = itf.joint_probabilities_polarized(core.random_density(8, 2, 3, grid=grid8), statistics)
        assert abs(itf.total_probability(t) - 1) < 1e-12
        assert [str(x) for x in t.labels] == ["1h", "1v", "2h", "2v"]


class TestTotalProbability:
    @pytest.mark.parametrize("seed", range(100))
    def test_unitary_setups(self, seed):
        g = Grid(7, -1, 1)
        u = optics.haar_transfer(seed)
        ref = core.random_state(g, seed + 500)
        s = BOSON if seed % 3 else FERMION
        if seed % 2:
            t = itf.joint_probabilities_pure(u, core.random_state(g, seed), ref, s)
        else:
            t = itf.joint_probabilities_mixed(u, core.random_density(7, 1 + seed % 7, seed, grid=g), ref, s)
        assert abs(itf.total_probability(t) - 1) < 1e-9

    def test_lossy_below_one(self, grid8, statistics):
        rho = core.random_density(8, 3, 2, grid=grid8)
        u = optics.lossy_tomography_matrix(ETA_IM)
        ref = core.flat_reference(grid8)
        t = itf.joint_probabilities_mixed(u, rho, ref, statistics)
        expected = oracle_exclusive_total(oracle_mixed_density(u.entries, rho.entries, ref.amplitudes,
                                                               statistics.sign))
        assert itf.total_probability(t) < 1
        assert abs(itf.total_probability(t) - expected) < 1e-13


class TestOutcomeTableValidation:
    def _density(self, value):
        d = np.zeros((2, 2, 2, 2))
        d[0, 0, 1, 1] = d[1, 1, 0, 0] = value
        return d

    def test_negative_rejected(self):
        with pytest.raises(InconsistentTableError):
            OutcomeTable(Grid(2, 0, 1), BOSON, optics.balanced_splitter().output_labels,
                         self._density(-1e-10))

    def test_rounding_clamped(self):
        t = OutcomeTable(Grid(2, 0, 1), BOSON, optics.balanced_splitter().output_labels,
                         self._density(-1e-15))
        assert np.min(t.density) == 0.0

    def test_shape(self):
        with pytest.raises(ValidationError):
            OutcomeTable(Grid(2, 0, 1), BOSON, optics.balanced_splitter().output_labels, np.zeros((2, 2)))


class TestSampling:
    def _hom_table(self, n=8):
        g = Grid(n, -1, 1)
        psi = core.gaussian_state(g, 0.0, 0.4)
        return itf.joint_probabilities_pure(optics.balanced_splitter(), psi, psi, BOSON)

    def test_hom_coincidences_never_drawn(self):
        t = self._hom_table()
        cnt = itf.sample_counts(t, 10**6, 1)
        keys = t.outcome_keys()
        coincidence = keys[:, 0] != keys[:, 2]
        assert cnt.counts[coincidence].sum() == 0
        assert cnt.counts.sum() + cnt.discarded == 10**6

    def test_deterministic(self):
        t = self._hom_table()
        a, b = itf.sample_counts(t, 1000, 42), itf.sample_counts(t, 1000, 42)
        np.testing.assert_array_equal(a.counts, b.counts)
        assert a.discarded == b.discarded
        assert not np.array_equal(a.counts, itf.sample_counts(t, 1000, 43).counts)

    def test_lossy_discards(self, grid8):
        t = itf.joint_probabilities_mixed(optics.lossy_tomography_matrix(ETA_IM),
                                          core.maximally_mixed(grid8), core.flat_reference(grid8), BOSON)
        cnt = itf.sample_counts(t, 10**5, 0)
        lost = 1 - itf.total_probability(t)
        assert cnt.counts.sum() + cnt.discarded == 10**5
        assert abs(cnt.discarded / 10**5 - lost) < 0.01

    def test_concentration(self, grid8):
        t = itf.joint_probabilities_mixed(optics.haar_transfer(2), core.random_density(8, 3, 1, grid=grid8),
                                          core.flat_reference(grid8), FERMION)
        p = t.exclusive_probabilities()

        def median_error(shots):
            errs = [np.linalg.norm(itf.sample_counts(t, shots, s).counts / shots - p) for s in range(11)]
            return np.median(errs)

        assert median_error(40000) < median_error(10000)

    def test_count_map_and_empirical(self):
        t = self._hom_table(4)
        cnt = itf.sample_counts(t, 500, 3)
        assert sum(cnt.count_map.values()) == 500 - cnt.discarded
        emp = cnt.empirical_table()
        np.testing.assert_allclose(emp.exclusive_probabilities(), cnt.counts / 500)

    @pytest.mark.parametrize("shots", [0, -5, 2.5])
    def test_invalid_shots(self, shots):
        with pytest.raises(ValidationError):
            itf.sample_counts(self._hom_table(4), shots, 0)

    def test_invariant_enforced(self):
        t = self._hom_table(4)
        with pytest.raises(ValidationError):
            itf.CountTable(t, 10, np.zeros(t.outcome_keys().shape[0], int), 3)


class TestCsv:
    def test_header_and_digits(self, grid8):
        t = itf.joint_probabilities_pure(optics.balanced_splitter(), core.random_state(grid8, 1),
                                         core.flat_reference(grid8), BOSON)
        lines = itf.table_csv_text(t).splitlines()
        assert lines[0] == "alpha,beta,i,j,x_i,x_j,p"
        assert len(lines) == 1 + t.outcome_keys().shape[0]
        first = lines[1].split(",")
        assert first[:4] == ["1", "1", "0", "0"] and float(first[4]) == grid8.points[0]

    @pytest.mark.parametrize("polarized", [False, True])
    def test_roundtrip_bitwise(self, grid8, polarized):
        rho = core.random_density(8, 2, 4, grid=grid8)
        if polarized:
            t = itf.joint_probabilities_polarized(rho, FERMION)
        else:
            t = itf.joint_probabilities_mixed(optics.haar_transfer(1), rho, core.flat_reference(grid8), FERMION)
        back, counts = itf.read_table_csv(io.StringIO(itf.table_csv_text(t)), FERMION)
        assert counts is None
        assert back.grid.matches(grid8) and back.labels == t.labels
        assert back.density.tobytes() == t.density.tobytes()

    def test_counts_trailer(self, grid8):
        t = itf.joint_probabilities_mixed(optics.lossy_tomography_matrix(ETA_IM), core.maximally_mixed(grid8),
                                          core.flat_reference(grid8), BOSON)
        cnt = itf.sample_counts(t, 2000, 5)
        text = itf.table_csv_text(t, cnt)
        assert text.splitlines()[0].endswith(",count")
        assert text.splitlines()[-1] == f"# discarded={cnt.discarded} shots=2000"
        freq, parsed = itf.read_table_csv(io.StringIO(text), BOSON)
        np.testing.assert_array_equal(parsed.counts, cnt.counts)
        assert parsed.discarded == cnt.discarded
        np.testing.assert_allclose(freq.exclusive_probabilities(), cnt.counts / 2000)

    def test_missing_columns(self):
        with pytest.raises(ValidationError, match="missing columns"):
            itf.read_table_csv(io.StringIO("alpha,beta,i,j\n1,1,0,0\n"), BOSON)

    def test_missing_rows_become_nan(self, grid8):
        t = itf.joint_probabilities_pure(optics.balanced_splitter(), core.random_state(grid8, 1),
                                         core.flat_reference(grid8), BOSON)
        lines = itf.table_csv_text(t).splitlines()
        back, _ = itf.read_table_csv(io.StringIO("\n".join(lines[:-5]) + "\n"), BOSON, grid=grid8)
        assert np.isnan(back.exclusive_probabilities()).sum() == 5
