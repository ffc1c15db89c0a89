import math

import mpmath
import numpy as np
import pytest

from scorefp import metrics_io as mio
from scorefp import sde_problems as sp
from scorefp import training as tr


class TestRelativeErrors:
    def test_exact_match(self):
        l2, linf = mio.relative_errors(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
        assert l2 == 0.0 and linf == 0.0

    def test_known_values(self):
        # pred - exact = (1, 0); ||exact|| = sqrt(5)
        l2, linf = mio.relative_errors(np.array([2.0, 2.0]), np.array([1.0, 2.0]))
        assert np.isclose(l2, 1.0 / math.sqrt(5.0), atol=1e-15)
        assert np.isclose(linf, 0.5, atol=1e-15)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        exact = rng.normal(size=20)
        pred = exact + rng.normal(size=20) * 0.1
        a = mio.relative_errors(pred, exact)
        b = mio.relative_errors(7.0 * pred, 7.0 * exact)
        assert np.allclose(a, b, rtol=1e-12)

    def test_zero_denominator(self):
        with pytest.raises(ValueError):
            mio.relative_errors(np.array([1.0]), np.array([0.0]))

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            mio.relative_errors(np.array([1.0]), np.array([1.0, 2.0]))
        with pytest.raises(ValueError):
            mio.relative_errors(np.empty(0), np.empty(0))
        with pytest.raises(ValueError):
            mio.relative_errors(np.ones((2, 2)), np.ones((2, 2)))


class TestPdfErrors:
    def test_shift_invariance_exact(self):
        rng = np.random.default_rng(1)
        exact = rng.normal(-300.0, 5.0, size=30)
        pred = exact + rng.normal(size=30) * 0.05
        a = mio.pdf_errors_from_ll(pred, exact)
        b = mio.pdf_errors_from_ll(pred + 1234.5, exact + 1234.5)
        assert np.allclose(a, b, rtol=1e-9)

    def test_huge_negative_ll_no_underflow(self):
        # raw exp of these would underflow to zero for every entry
        exact = np.array([-5000.0, -5001.0, -5002.0])
        pred = exact + np.array([0.1, -0.1, 0.0])
        l2, linf = mio.pdf_errors_from_ll(pred, exact)
        assert 0 < l2 < 0.2

    def test_matches_mpmath_oracle(self):
        rng = np.random.default_rng(2)
        exact = rng.normal(-10.0, 2.0, size=15)
        pred = exact + rng.normal(size=15) * 0.3
        got_l2, got_linf = mio.pdf_errors_from_ll(pred, exact)
        with mpmath.workdps(50):
            p = [mpmath.e**mpmath.mpf(v) for v in pred]
            e = [mpmath.e**mpmath.mpf(v) for v in exact]
            diff = [pi - ei for pi, ei in zip(p, e)]
            ref_l2 = mpmath.sqrt(mpmath.fsum(d**2 for d in diff)) \
                / mpmath.sqrt(mpmath.fsum(x**2 for x in e))
            ref_linf = max(abs(d) for d in diff) / max(abs(x) for x in e)
        assert np.isclose(got_l2, float(ref_l2), rtol=1e-10)
        assert np.isclose(got_linf, float(ref_linf), rtol=1e-10)


class TestReports:
    def _rep(self, **kw):
        base = dict(method="sm", d=3, seed=0, ll_l2=0.1, ll_linf=0.2,
                    pdf_l2=0.3, pdf_linf=0.4, rate=0.01, epochs=100)
        base.update(kw)
        return mio.ErrorReport(**base)

    def test_negative_error_rejected(self):
        with pytest.raises(ValueError):
            self._rep(ll_l2=-0.1)

    def test_mean_report(self):
        m = mio.mean_report([self._rep(seed=0, ll_l2=0.1),
                             self._rep(seed=1, ll_l2=0.3)])
        assert m.seed == "mean"
        assert np.isclose(m.ll_l2, 0.2)
        assert m.method == "sm" and m.epochs == 100

    def test_mean_of_empty(self):
        with pytest.raises(ValueError):
            mio.mean_report([])

    def test_emit_parse_round_trip(self, tmp_path):
        path = str(tmp_path / "out.csv")
        reports = [self._rep(seed=0), self._rep(seed=1, ll_l2=0.15)]
        reports.append(mio.mean_report(reports))
        mio.emit_results(reports, path)
        back = mio.parse_results(path)
        assert back == reports

    def test_emit_empty_is_header_only(self, tmp_path):
        path = str(tmp_path / "empty.csv")
        mio.emit_results([], path)
        text = open(path).read()
        assert text == ",".join(mio.CSV_COLUMNS) + "\n"

    def test_emit_json(self, tmp_path):
        import json
        path = str(tmp_path / "out.json")
        mio.emit_results([self._rep()], path, format="json")
        rows = json.loads(open(path).read())
        assert rows == [{c: getattr(self._rep(), c) for c in mio.CSV_COLUMNS}]

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            mio.emit_results([], str(tmp_path / "x"), format="yaml")


class TestExperimentConfig:
    def test_json_round_trip(self):
        cfg = mio.ExperimentConfig(
            problem="gbm", d=4, method=tr.SSM,
            train=tr.TrainConfig(method=tr.SSM, epochs=100, hidden=32,
                                 seeds=(0, 1)))
        back = mio.ExperimentConfig.from_json(cfg.to_json())
        assert back == cfg

    def test_unknown_problem(self):
        with pytest.raises(ValueError):
            mio.ExperimentConfig(problem="heat-equation")

    def test_unknown_score_mode(self):
        with pytest.raises(ValueError):
            mio.ExperimentConfig(score_mode="magic")


class TestTestSet:
    def test_shapes_and_times(self):
        prob = sp.make_ou(3, seed=0)
        x, t = mio.make_test_set(prob, 100, 5, np.random.default_rng(0))
        assert x.shape == (100, 3) and t.shape == (100,)
        assert set(np.round(np.unique(t), 10)) == {0.2, 0.4, 0.6, 0.8, 1.0}

    def test_marginal_law(self):
        prob = sp.make_ou(2, seed=1)
        x, t = mio.make_test_set(prob, 100_000, 2, np.random.default_rng(1))
        half = x[t == prob.T]
        assert np.allclose(np.cov(half.T), prob.marginal(prob.T).cov.sigma,
                           atol=0.03)

    def test_em_fallback_when_no_marginal(self):
        from scorefp import distributions as dist
        prob = sp.make_ou_nongaussian(2, dist.LAPLACE, seed=2)
        x, t = mio.make_test_set(prob, 50, 5, np.random.default_rng(2))
        assert x.shape == (50, 2)
        assert np.all(np.isfinite(x))


class TestRunExperiment:
    def _config(self, **kw):
        base = dict(
            problem="ou", d=2, method=tr.SM, test_size=200, n_test_times=2,
            score_mode="exact",
            train=tr.TrainConfig(method=tr.SM, epochs=40, n_residual=64,
                                 hidden=16, n_layers=2, seeds=(0,),
                                 valid_every=20, valid_size=64))
        base.update(kw)
        return mio.ExperimentConfig(**base)

    def test_schema_and_rows(self, tmp_path):
        out = str(tmp_path / "res.csv")
        reports = mio.run_experiment(self._config(out=out))
        assert len(reports) == 2            # one seed + mean
        assert reports[-1].seed == "mean"
        parsed = mio.parse_results(out)
        assert parsed == reports
        import json, os
        rows = json.loads(open(os.path.splitext(out)[0] + ".json").read())
        assert len(rows) == 2

    def test_identical_csv_bytes(self, tmp_path):
        a, b = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
        ra = mio.run_experiment(self._config(out=a))
        rb = mio.run_experiment(self._config(out=b))
        # the timing column is the only nondeterministic field
        for x, y in zip(ra, rb):
            assert (x.ll_l2, x.ll_linf, x.pdf_l2, x.pdf_linf) == \
                   (y.ll_l2, y.ll_linf, y.pdf_l2, y.pdf_linf)

    def test_exact_score_shortcut_accuracy(self, tmp_path):
        # with the analytic score frozen, even a short stage-2 run should get
        # the LL roughly right at d=2
        cfg = self._config(
            train=tr.TrainConfig(method=tr.SM, epochs=400, n_residual=128,
                                 hidden=32, n_layers=2, seeds=(0,),
                                 valid_every=100, valid_size=128))
        reports = mio.run_experiment(cfg)
        assert reports[0].ll_l2 < 0.3
