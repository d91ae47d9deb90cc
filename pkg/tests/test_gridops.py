import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agtfp.errors import DataValidationError, DomainError, ParseError
from agtfp.gridops import (
    CountryMask,
    FieldSeries,
    GridField,
    GridSpec,
    Variable,
    ZonalReport,
    coarsen_area_weighted,
    month_stamp,
    parse_month_stamp,
    read_grid,
    read_mask,
    read_series,
    resample_bilinear,
    write_grid,
    write_mask,
    zonal_aggregate,
)


def field(spec, values, variable=Variable.tmean, stamp="2000-01"):
    return GridField(spec, np.asarray(values, dtype=float), variable, stamp)


class TestGridSpec:
    def test_rejects_poles_and_bad_steps(self):
        with pytest.raises(DomainError):
            GridSpec(lat0=89.0, lon0=0.0, dlat=1.0, dlon=1.0, nlat=2, nlon=1)
        with pytest.raises(DomainError):
            GridSpec(lat0=0.0, lon0=0.0, dlat=0.0, dlon=1.0, nlat=1, nlon=1)

    def test_weight_fractions_checked(self):
        spec = GridSpec(0.0, 0.0, 1.0, 1.0, 1, 2)
        with pytest.raises(DomainError):
            GridField(spec, np.array([[0.5, 1.5]]), Variable.weight)

    def test_shape_checked(self):
        with pytest.raises(DataValidationError):
            GridField(GridSpec(0.0, 0.0, 1.0, 1.0, 2, 2), np.zeros((3, 2)), Variable.tmean)


class TestResample:
    @settings(max_examples=25, deadline=None)
    @given(st.floats(-50.0, 50.0, allow_nan=False))
    def test_constant_passes_through(self, c):
        src = GridSpec(-10.0, -20.0, 2.5, 2.5, 8, 10)
        dst = GridSpec(-11.0, -21.0, 0.7, 0.9, 30, 40)
        out = resample_bilinear(field(src, np.full(src.shape, c)), dst)
        assert (out.values == c).all()

    def test_midway_between_columns(self):
        src = GridSpec(0.0, 0.0, 1.0, 1.0, 2, 2)
        dst = GridSpec(0.0, 0.5, 1.0, 1.0, 1, 1)
        out = resample_bilinear(field(src, [[0.0, 1.0], [0.0, 1.0]]), dst)
        assert out.values[0, 0] == pytest.approx(0.5)

    def test_identity_grid(self):
        spec = GridSpec(-5.0, 10.0, 0.5, 0.5, 6, 7)
        values = np.random.default_rng(0).normal(size=spec.shape)
        out = resample_bilinear(field(spec, values), spec)
        np.testing.assert_allclose(out.values, values, atol=1e-12, rtol=0)

    def test_missing_neighbor_renormalized(self):
        src = GridSpec(0.0, 0.0, 1.0, 1.0, 1, 3)
        dst = GridSpec(0.0, 0.5, 1.0, 1.0, 1, 2)
        out = resample_bilinear(field(src, [[np.nan, 4.0, 6.0]]), dst)
        assert out.values[0, 0] == pytest.approx(4.0)
        assert out.values[0, 1] == pytest.approx(5.0)

    def test_all_missing_neighbors(self):
        src = GridSpec(0.0, 0.0, 1.0, 1.0, 1, 2)
        dst = GridSpec(0.0, 0.5, 1.0, 1.0, 1, 1)
        out = resample_bilinear(field(src, [[np.nan, np.nan]]), dst)
        assert np.isnan(out.values[0, 0])

    def test_no_overlap(self):
        src = GridSpec(0.0, 0.0, 1.0, 1.0, 2, 2)
        dst = GridSpec(50.0, 100.0, 1.0, 1.0, 2, 2)
        with pytest.raises(DomainError):
            resample_bilinear(field(src, np.zeros((2, 2))), dst)


class TestCoarsen:
    def test_equal_latitudes(self):
        src = GridSpec(0.0, 0.25, 1.0, 0.5, 1, 2)
        dst = GridSpec(0.0, 0.5, 1.0, 1.0, 1, 1)
        out = coarsen_area_weighted(field(src, [[2.0, 4.0]]), dst)
        assert out.values[0, 0] == pytest.approx(3.0)

    def test_cosine_latitude_weights(self):
        src = GridSpec(0.0, 0.0, 60.0, 1.0, 2, 1)
        dst = GridSpec(30.0, 0.0, 120.0, 1.0, 1, 1)
        out = coarsen_area_weighted(field(src, [[2.0], [4.0]]), dst)
        assert out.values[0, 0] == pytest.approx(8.0 / 3.0, rel=1e-12)

    def test_missing_members_skipped_and_empty_cells_nan(self):
        src = GridSpec(0.0, 0.25, 1.0, 0.5, 1, 2)
        dst = GridSpec(0.0, 0.5, 1.0, 1.0, 1, 3)
        out = coarsen_area_weighted(field(src, [[np.nan, 4.0]]), dst)
        assert out.values[0, 0] == pytest.approx(4.0)
        assert np.isnan(out.values[0, 1:]).all()


class TestZonal:
    spec = GridSpec(0.0, 0.0, 1.0, 1.0, 1, 3)
    mask = CountryMask(spec, np.array([[0, 0, 1]]), ("AAA", "BBB", "CCC"))

    def weights(self, values):
        return GridField(self.spec, np.array([values], dtype=float), Variable.weight)

    def test_uniform_weights(self):
        out = zonal_aggregate([field(self.spec, [[10.0, 20.0, 7.0]])], self.weights([1.0, 1.0, 1.0]), self.mask, ["AAA"])
        assert out["value"].iloc[0] == pytest.approx(15.0)

    def test_single_weighted_cell(self):
        out = zonal_aggregate([field(self.spec, [[10.0, 20.0, 7.0]])], self.weights([1.0, 0.0, 1.0]), self.mask, ["AAA"])
        assert out["value"].iloc[0] == 10.0

    def test_zero_weight_falls_back_to_area_mean(self):
        report = ZonalReport()
        out = zonal_aggregate(
            [field(self.spec, [[10.0, 20.0, 7.0]])], self.weights([0.0, 0.0, 1.0]), self.mask, ["AAA"], report
        )
        assert out["value"].iloc[0] == pytest.approx(15.0)
        assert report.fallback == ["AAA"]

    def test_absent_country_reported(self):
        report = ZonalReport()
        out = zonal_aggregate(
            [field(self.spec, [[10.0, 20.0, 7.0]])], self.weights([1.0, 1.0, 1.0]), self.mask, ["AAA", "CCC"], report
        )
        assert set(out["country"]) == {"AAA"}
        assert report.absent == ["CCC"]

    def test_missing_cells_excluded(self):
        out = zonal_aggregate([field(self.spec, [[np.nan, 20.0, 7.0]])], self.weights([1.0, 1.0, 1.0]), self.mask, ["AAA"])
        assert out["value"].iloc[0] == 20.0

    def test_series_input(self):
        s = FieldSeries(self.spec, Variable.tmean, [2000, 2000], [1, 2], np.array([[[1.0, 3.0, 0.0]], [[5.0, 7.0, 0.0]]]))
        out = zonal_aggregate(s, self.weights([1.0, 1.0, 1.0]), self.mask, ["AAA", "BBB"])
        got = out.set_index(["country", "stamp"])["value"]
        assert got[("AAA", "2000-01")] == pytest.approx(2.0)
        assert got[("AAA", "2000-02")] == pytest.approx(6.0)
        assert got[("BBB", "2000-02")] == 0.0


    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.floats(-100.0, 100.0), min_size=3, max_size=3),
        st.lists(st.one_of(st.just(0.0), st.floats(1e-3, 1.0)), min_size=3, max_size=3),
    )
    def test_value_within_cell_range(self, values, weights):
        out = zonal_aggregate([field(self.spec, [values])], self.weights(weights), self.mask, ["AAA", "BBB"])
        got = out.set_index("country")["value"]
        aaa = values[:2]
        assert min(aaa) - 1e-9 <= got["AAA"] <= max(aaa) + 1e-9
        assert got["BBB"] == pytest.approx(values[2], abs=1e-12)

    def test_coarsen_then_aggregate_matches_direct(self):
        fine = GridSpec(0.25, 0.25, 0.5, 0.5, 4, 4)
        coarse = GridSpec(0.5, 0.5, 1.0, 1.0, 2, 2)
        fine_mask = CountryMask(fine, np.repeat([[0], [0], [1], [1]], 4, axis=1), ("AAA", "BBB"))
        coarse_mask = CountryMask(coarse, np.array([[0, 0], [1, 1]]), ("AAA", "BBB"))
        values = np.random.default_rng(5).normal(15.0, 5.0, fine.shape)

        direct = zonal_aggregate([field(fine, values)], GridField(fine, np.ones(fine.shape), Variable.weight), fine_mask)
        coarsened = coarsen_area_weighted(field(fine, values), coarse)
        via = zonal_aggregate([coarsened], GridField(coarse, np.ones(coarse.shape), Variable.weight), coarse_mask)
        np.testing.assert_allclose(via["value"].to_numpy(), direct["value"].to_numpy(), rtol=0, atol=1e-9)


class TestSeries:
    def test_from_fields_sorts_by_time(self):
        spec = GridSpec(0.0, 0.0, 1.0, 1.0, 1, 1)
        fields = [field(spec, [[float(m)]], stamp=month_stamp(2001, m)) for m in (3, 1, 2)]
        s = FieldSeries.from_fields(fields)
        assert s.months.tolist() == [1, 2, 3]
        assert s.values[:, 0, 0].tolist() == [1.0, 2.0, 3.0]
        assert len(s.between(2002, 2003)) == 0

    def test_bad_stamp(self):
        with pytest.raises(DataValidationError):
            parse_month_stamp("2001/03")


class TestGridFile:
    def test_multi_record_file(self, tmp_path):
        spec = GridSpec(-1.0, 2.0, 0.5, 0.5, 2, 3)
        fields = [field(spec, np.full(spec.shape, float(m)), stamp=month_stamp(1999, m)) for m in range(1, 4)]
        fields[1].values[0, 0] = np.nan
        path = write_grid(tmp_path / "t.grid", fields)
        back = read_grid(path)
        assert [f.stamp for f in back] == ["1999-01", "1999-02", "1999-03"]
        assert back[0].spec.same_as(spec)
        assert np.isnan(back[1].values[0, 0])
        assert read_series(path).values.shape == (3, 2, 3)

    def test_truncated_file(self, tmp_path):
        spec = GridSpec(0.0, 0.0, 1.0, 1.0, 2, 2)
        path = write_grid(tmp_path / "t.grid", field(spec, np.zeros((2, 2))))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(ParseError):
            read_grid(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.grid"
        path.write_bytes(b"NOTGRID" * 20)
        with pytest.raises(ParseError):
            read_grid(path)

    def test_mask_with_legend(self, tmp_path):
        spec = GridSpec(0.0, 0.0, 1.0, 1.0, 1, 3)
        mask = CountryMask(spec, np.array([[0, -1, 1]]), ("AAA", "BBB"))
        write_mask(tmp_path / "mask.grid", tmp_path / "legend.csv", mask)
        back = read_mask(tmp_path / "mask.grid", tmp_path / "legend.csv")
        assert back.countries == ("AAA", "BBB")
        assert back.codes.tolist() == [[0, -1, 1]]
