import math

import numpy as np
import pytest

from taylorformer.errors import ConfigError, GenerationError
from taylorformer.gp import (
    KernelSpec,
    kernel_eval,
    kernel_matrix,
    sample_gp_tasks,
    sample_gp_y,
)


class TestKernelEval:
    def test_rbf_zero_distance_is_amplitude_squared(self):
        spec = KernelSpec("rbf", s=0.7, l=0.3)
        assert kernel_eval(spec, 1.5, 1.5) == pytest.approx(0.49, abs=1e-15)

    def test_matern_zero_distance_is_one(self):
        spec = KernelSpec("matern52", l=0.5)
        assert kernel_eval(spec, -0.2, -0.2) == 1.0

    def test_rbf_unit_distance(self):
        spec = KernelSpec("rbf", s=1.0, l=1.0)
        assert kernel_eval(spec, 0.0, 1.0) == pytest.approx(
            math.exp(-0.5), abs=1e-12
        )

    def test_periodic_zero_distance_is_one(self):
        spec = KernelSpec("periodic", l=0.4, p=0.8)
        assert kernel_eval(spec, 0.3, 0.3) == 1.0

    def test_periodic_distance_is_squared_by_default(self):
        spec = KernelSpec("periodic", l=0.4, p=0.8)
        d = 0.37
        expected = math.exp(-2.0 * math.sin(math.pi * d**2 / 0.8) ** 2 / 0.16)
        assert kernel_eval(spec, 0.0, d) == pytest.approx(expected, abs=1e-15)

    def test_periodic_conventional_switch(self):
        spec = KernelSpec("periodic", l=0.4, p=0.8, squared_distance_period=False)
        d = 0.37
        expected = math.exp(-2.0 * math.sin(math.pi * d / 0.8) ** 2 / 0.16)
        assert kernel_eval(spec, 0.0, d) == pytest.approx(expected, abs=1e-15)

    def test_rejects_nonpositive_hyperparameters(self):
        with pytest.raises(ConfigError):
            KernelSpec("rbf", s=0.0, l=0.5)
        with pytest.raises(ConfigError):
            KernelSpec("periodic", l=0.5, p=-1.0)

    def test_matrix_matches_scalar_eval(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-2, 2, size=6)
        for kind in ("rbf", "matern52", "periodic"):
            spec = KernelSpec(kind, s=0.8, l=0.5, p=0.7)
            mat = kernel_matrix(spec, x)
            for i in range(6):
                for j in range(6):
                    assert mat[i, j] == pytest.approx(
                        kernel_eval(spec, x[i], x[j]), abs=1e-12
                    )


class TestGpSampling:
    def test_zero_mean(self):
        spec = KernelSpec("rbf", s=0.6, l=0.4)
        x = np.array([-1.0, 0.5])
        rng = np.random.default_rng(1)
        draws = np.array([sample_gp_y(spec, x, rng) for _ in range(10_000)])
        bound = 3.0 * 0.6 / math.sqrt(10_000)
        assert np.max(np.abs(draws.mean(axis=0))) < bound

    def test_covariance_monte_carlo(self):
        x = np.array([-0.8, 0.0, 0.9])
        rng = np.random.default_rng(2)
        for kind in ("rbf", "matern52", "periodic"):
            spec = KernelSpec(kind, s=0.7, l=0.5, p=0.8)
            draws = np.array([sample_gp_y(spec, x, rng) for _ in range(6000)])
            emp = draws.T @ draws / len(draws)
            for i in range(3):
                for j in range(3):
                    assert abs(emp[i, j] - kernel_eval(spec, x[i], x[j])) < 0.05

    def test_generation_error_after_jitter_escalation(self, monkeypatch):
        def always_fail(_):
            raise np.linalg.LinAlgError("nope")

        monkeypatch.setattr(np.linalg, "cholesky", always_fail)
        spec = KernelSpec("rbf", s=0.5, l=0.3)
        with pytest.raises(GenerationError):
            sample_gp_y(spec, np.array([0.0, 1.0]), np.random.default_rng(3))


class TestTaskGeneration:
    def test_sequences_have_expected_layout(self):
        tasks = sample_gp_tasks("rbf", 5, 123)
        for t in tasks:
            assert t.length == 100
            assert 3 <= t.n_context <= 97
            assert t.n_target == 100 - t.n_context
            assert t.x.min() >= -2.0 and t.x.max() <= 2.0

    def test_seeded_generation_is_reproducible(self):
        a = sample_gp_tasks("matern52", 3, 9)
        b = sample_gp_tasks("matern52", 3, 9)
        for ta, tb in zip(a, b):
            assert np.array_equal(ta.x, tb.x)
            assert np.array_equal(ta.y, tb.y)

    def test_sequence_streams_independent_of_count(self):
        few = sample_gp_tasks("rbf", 2, 5)
        many = sample_gp_tasks("rbf", 4, 5)
        for ta, tb in zip(few, many[:2]):
            assert np.array_equal(ta.x, tb.x)

    def test_bad_kind_rejected(self):
        with pytest.raises(ConfigError):
            sample_gp_tasks("linear", 1, 0)
