"""Domain types, the compositional link, and file parsing."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimix.config import (
    ModelConfig,
    apply_overrides,
    default_a_grid,
    load_config,
    format_config,
    parse_config_text,
    spike_slab_b0,
)
from mimix.data import (
    Composition,
    CountTable,
    DesignSpec,
    ExperimentDesign,
    inverse_log_ratio,
    load_count_table,
    load_design,
    write_count_table,
)
from mimix.errors import ConfigError, ParseError, ValidationError


class TestInverseLogRatio:
    def test_symmetry(self):
        assert np.allclose(inverse_log_ratio(np.zeros(4)), 0.25)

    def test_shift_invariance_constant_vector(self):
        for c in (-3.0, 0.7, 123.0):
            assert np.allclose(inverse_log_ratio(np.full(6, c)), 1 / 6)

    def test_hand_computed_example(self):
        theta = np.log([1.0, 2.0, 3.0, 4.0])
        assert np.allclose(inverse_log_ratio(theta), [0.1, 0.2, 0.3, 0.4],
                           atol=1e-14)

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            inverse_log_ratio(np.array([0.0, np.inf]))
        with pytest.raises(ValidationError):
            inverse_log_ratio(np.array([0.0, np.nan]))

    @settings(max_examples=200, deadline=None)
    @given(
        theta=st.lists(st.floats(min_value=-50, max_value=50), min_size=2,
                       max_size=12),
        shift=st.floats(min_value=-700, max_value=700),
    )
    def test_shift_invariance_property(self, theta, shift):
        theta = np.asarray(theta)
        base = inverse_log_ratio(theta)
        shifted = inverse_log_ratio(theta + shift)
        assert np.all(np.abs(base - shifted) <= 1e-12)

    def test_matrix_rows(self):
        theta = np.array([[0.0, 0.0], [np.log(3.0), 0.0]])
        phi = inverse_log_ratio(theta)
        assert np.allclose(phi, [[0.5, 0.5], [0.75, 0.25]])


class TestComposition:
    def test_from_theta(self):
        c = Composition.from_theta(np.array([0.0, 1.0, -1.0]))
        assert abs(c.phi.sum() - 1.0) < 1e-12
        assert not c.phi.flags.writeable

    def test_bad_pair_rejected(self):
        with pytest.raises(ValidationError):
            Composition(theta=np.zeros(3), phi=np.array([0.5, 0.2, 0.2]))


class TestCountTable:
    def test_totals_are_row_sums(self):
        t = CountTable.from_arrays(np.array([[1, 2], [3, 4], [0, 5]]),
                                   ["a", "b", "c"], ["t1", "t2"])
        assert np.array_equal(t.totals, [3, 7, 5])
        assert t.n_samples == 3 and t.n_taxa == 2

    def test_negative_entry_names_row_and_column(self):
        with pytest.raises(ValidationError, match="sample 'b'.*taxon 't2'"):
            CountTable.from_arrays(np.array([[1, 2], [3, -1]]),
                                   ["a", "b"], ["t1", "t2"])

    def test_all_zero_taxon_rejected(self):
        with pytest.raises(ValidationError, match="t2"):
            CountTable.from_arrays(np.array([[1, 0], [3, 0]]),
                                   ["a", "b"], ["t1", "t2"])

    def test_zero_total_sample_rejected(self):
        with pytest.raises(ValidationError, match="zero total"):
            CountTable.from_arrays(np.array([[1, 1], [0, 0]]),
                                   ["a", "b"], ["t1", "t2"])

    def test_non_integer_rejected(self):
        with pytest.raises(ValidationError, match="integer"):
            CountTable.from_arrays(np.array([[1.5, 2.0]]), ["a"], ["t1", "t2"])

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValidationError, match="duplicate"):
            CountTable.from_arrays(np.array([[1, 2], [3, 4]]),
                                   ["a", "a"], ["t1", "t2"])

    def test_counts_are_immutable(self):
        t = CountTable.from_arrays(np.array([[1, 2]]), ["a"], ["t1", "t2"])
        with pytest.raises(ValueError):
            t.counts[0, 0] = 9


class TestCountTableIO:
    def test_load_well_formed(self, tmp_path):
        p = tmp_path / "counts.tsv"
        p.write_text("sample_id\tOTU1\tOTU2\nA\t1\t2\nB\t3\t4\nC\t5\t6\n")
        t = load_count_table(str(p))
        assert t.taxon_ids == ("OTU1", "OTU2")
        assert np.array_equal(t.totals, [3, 7, 11])

    def test_comma_delimited(self, tmp_path):
        p = tmp_path / "counts.csv"
        p.write_text("id,OTU1,OTU2\nA,1,2\nB,3,4\n")
        assert load_count_table(str(p)).n_samples == 2

    def test_negative_cell_reports_location(self, tmp_path):
        p = tmp_path / "counts.tsv"
        p.write_text("id\tOTU1\tOTU2\nA\t1\t2\nB\t-1\t4\n")
        with pytest.raises(ParseError, match=r":3: negative count.*OTU1"):
            load_count_table(str(p))

    def test_non_integer_cell_reports_location(self, tmp_path):
        p = tmp_path / "counts.tsv"
        p.write_text("id\tOTU1\tOTU2\nA\t1\t2.5\n")
        with pytest.raises(ParseError, match=r":2: non-integer.*OTU2"):
            load_count_table(str(p))

    def test_all_zero_column_names_taxon(self, tmp_path):
        p = tmp_path / "counts.tsv"
        p.write_text("id\tOTU1\tOTU2\nA\t1\t0\nB\t2\t0\n")
        with pytest.raises(ParseError, match="OTU2"):
            load_count_table(str(p))

    def test_duplicate_sample_id(self, tmp_path):
        p = tmp_path / "counts.tsv"
        p.write_text("id\tOTU1\nA\t1\nA\t2\n")
        with pytest.raises(ParseError, match="duplicate sample id 'A'"):
            load_count_table(str(p))

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "counts.tsv"
        p.write_text("id\tOTU1\tOTU2\nA\t1\n")
        with pytest.raises(ParseError, match=":2"):
            load_count_table(str(p))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError, match="cannot read"):
            load_count_table(str(tmp_path / "nope.tsv"))

    @settings(max_examples=30, deadline=None)
    @given(
        counts=st.lists(
            st.lists(st.integers(min_value=0, max_value=10_000),
                     min_size=3, max_size=3),
            min_size=2, max_size=6),
    )
    def test_round_trip_bit_for_bit(self, counts, tmp_path_factory):
        arr = np.asarray(counts, dtype=np.int64)
        arr[:, 0] += 1      # keep rows and columns observed
        arr[0, :] += 1
        table = CountTable.from_arrays(
            arr, [f"s{i}" for i in range(arr.shape[0])],
            [f"t{k}" for k in range(arr.shape[1])])
        path = tmp_path_factory.mktemp("io") / "t.tsv"
        write_count_table(table, str(path))
        back = load_count_table(str(path))
        assert back.sample_ids == table.sample_ids
        assert back.taxon_ids == table.taxon_ids
        assert np.array_equal(back.counts, table.counts)
        assert np.array_equal(back.totals, table.totals)


DESIGN_TEXT = """treat,dose,site,block
1,0.5,IA,1
0,1.5,IA,1
1,2.5,IA,2
0,0.5,KS,1
1,1.5,KS,1
0,2.5,KS,2
"""


class TestDesign:
    def test_single_block_factor(self, tmp_path):
        p = tmp_path / "design.csv"
        p.write_text(DESIGN_TEXT)
        spec = DesignSpec(covariates=("treat", "dose"), blocks=("site",))
        d = load_design(str(p), spec, n_expected=6)
        assert d.n_covariates == 2
        assert d.level_counts == (2,)
        assert list(d.blocks[:, 0]) == [0, 0, 0, 1, 1, 1]

    def test_nested_chain_site_block(self, tmp_path):
        p = tmp_path / "design.csv"
        p.write_text(DESIGN_TEXT)
        spec = DesignSpec(covariates=("treat", "dose"),
                          blocks=("site", "block"))
        d = load_design(str(p), spec, n_expected=6)
        # block "1" within IA and within KS are distinct nested levels
        assert d.level_counts == (2, 4)
        assert list(d.blocks[:, 1]) == [0, 0, 1, 2, 2, 3]
        assert d.block_names[1] == ("IA/1", "IA/2", "KS/1", "KS/2")

    def test_interaction_product_column(self, tmp_path):
        p = tmp_path / "design.csv"
        p.write_text(DESIGN_TEXT)
        spec = DesignSpec(covariates=("treat", "dose"), blocks=("site",),
                          interactions=(("treat", "dose"),))
        d = load_design(str(p), spec, n_expected=6)
        assert d.covariate_names == ("treat", "dose", "treat*dose")
        assert np.allclose(d.covariates[:, 2],
                           d.covariates[:, 0] * d.covariates[:, 1])

    def test_row_count_mismatch(self, tmp_path):
        p = tmp_path / "design.csv"
        p.write_text(DESIGN_TEXT)
        spec = DesignSpec(covariates=("treat",), blocks=("site",))
        with pytest.raises(ParseError, match="expected 40 data rows"):
            load_design(str(p), spec, n_expected=40)

    def test_missing_covariate_value(self, tmp_path):
        p = tmp_path / "design.csv"
        p.write_text("treat,site\n1,IA\n,KS\n")
        spec = DesignSpec(covariates=("treat",), blocks=("site",))
        with pytest.raises(ParseError, match=":3: missing value"):
            load_design(str(p), spec, n_expected=2)

    def test_unknown_column(self, tmp_path):
        p = tmp_path / "design.csv"
        p.write_text("treat,site\n1,IA\n0,KS\n")
        spec = DesignSpec(covariates=("nope",), blocks=("site",))
        with pytest.raises(ParseError, match="'nope' not found"):
            load_design(str(p), spec, n_expected=2)

    def test_all_zero_covariate_rejected(self, tmp_path):
        p = tmp_path / "design.csv"
        p.write_text("treat,site\n0,IA\n0,KS\n")
        spec = DesignSpec(covariates=("treat",), blocks=("site",))
        with pytest.raises(ParseError, match="identically zero"):
            load_design(str(p), spec, n_expected=2)

    def test_nutnet_layout(self, tmp_path):
        # 2x2 factorial with interaction, blocks nested in 4 sites
        rng = np.random.default_rng(0)
        rows = ["nutrient,exclusion,site,block"]
        sites = ["IA", "KS", "KY", "MN"]
        for s in sites:
            for b in ("1", "2", "3"):
                for nut in (0, 1):
                    for exc in (0, 1):
                        rows.append(f"{nut},{exc},{s},{b}")
        p = tmp_path / "design.csv"
        p.write_text("\n".join(rows) + "\n")
        spec = DesignSpec(covariates=("nutrient", "exclusion"),
                          blocks=("site", "block"),
                          interactions=(("nutrient", "exclusion"),))
        d = load_design(str(p), spec, n_expected=48)
        assert d.n_covariates == 3          # nutrient, exclusion, product
        assert d.level_counts == (4, 12)    # two random-effect levels


class TestModelConfig:
    def test_defaults_validate(self):
        cfg = ModelConfig().resolved(n_samples=40, n_taxa=100)
        assert cfg.n_factors == 40
        assert 1 / 100 in cfg.a_grid and 0.95 in cfg.a_grid

    def test_b0_rule(self):
        # c = 0.5 with L = 40 factors gives b0 = 40
        assert spike_slab_b0(0.5, 40) == 40.0
        assert spike_slab_b0(0.2, 10) == pytest.approx(40.0)

    def test_a_grid_default_contents(self):
        grid = default_a_grid(100)
        assert grid[0] == pytest.approx(0.01)
        assert grid[-1] == pytest.approx(0.95)

    def test_invariants(self):
        with pytest.raises(ConfigError):
            ModelConfig(iterations=100, burn_in=100).validate()
        with pytest.raises(ConfigError):
            ModelConfig(inclusion_prob=1.0).validate()
        with pytest.raises(ConfigError):
            ModelConfig(u0=0.0).validate()
        with pytest.raises(ConfigError):
            ModelConfig(variant="bogus").validate()
        with pytest.raises(ConfigError):
            ModelConfig(n_factors=0).validate()

    def test_parse_round_trip(self):
        cfg = ModelConfig(n_factors=12, iterations=400, burn_in=100,
                          seed=99, variant="no_factors", retain_lambda=True,
                          a_grid=(0.1, 0.5))
        text = format_config(cfg)
        parsed, spec = parse_config_text(text)
        assert parsed == cfg
        assert spec is None

    def test_unknown_key_is_error(self):
        with pytest.raises(ConfigError, match="unknown key 'bogus'"):
            parse_config_text("bogus = 1\n")

    def test_duplicate_key_is_error(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("seed = 1\nseed = 2\n")

    def test_design_section(self):
        text = ("seed = 3\n"
                "design_covariates = treat, dose\n"
                "design_blocks = site, block\n"
                "design_interactions = treat*dose\n")
        cfg, spec = parse_config_text(text)
        assert cfg.seed == 3
        assert spec.covariates == ("treat", "dose")
        assert spec.blocks == ("site", "block")
        assert spec.interactions == (("treat", "dose"),)

    def test_overrides_mirror_config_keys(self):
        cfg = apply_overrides(ModelConfig(), ["seed=7", "iterations=123"])
        assert cfg.seed == 7 and cfg.iterations == 123
        with pytest.raises(ConfigError, match="unknown config key"):
            apply_overrides(ModelConfig(), ["nope=1"])

    def test_load_config_file(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("seed = 5\nn_factors = auto\n# comment\nthin = 2\n")
        cfg, _ = load_config(str(p))
        assert cfg.seed == 5 and cfg.n_factors is None and cfg.thin == 2
