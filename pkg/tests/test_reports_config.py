import numpy as np
import pytest

from sketchmatch.config import ExperimentConfig, load_config
from sketchmatch.errors import DataError
from sketchmatch.metrics import MetricsRecord
from sketchmatch.reports import (
    aggregate,
    format_percent,
    read_csv,
    write_histograms,
    write_metrics,
    write_sweep,
)


class TestConfig:
    def test_defaults_parse_and_hash_stable(self):
        a, b = ExperimentConfig(), ExperimentConfig()
        assert a.hash() == b.hash()

    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[nonsense]\nx = 1\n")
        with pytest.raises(DataError, match="unknown config sections"):
            load_config(p)

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[corpus]\nn_identitties = 5\n")
        with pytest.raises(DataError, match="unknown keys"):
            load_config(p)

    def test_type_validation(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[corpus]\nn_identities = "many"\n')
        with pytest.raises(DataError, match="integer"):
            load_config(p)

    def test_hash_changes_iff_meaningful_field_changes(self, tmp_path):
        base = load_config(None)
        p = tmp_path / "c.toml"
        p.write_text("[corpus]\nn_identities = 60\n")  # the default, spelled out
        assert load_config(p).hash() == base.hash()
        p.write_text("[corpus]\nn_identities = 61\n")
        assert load_config(p).hash() != base.hash()

    def test_overrides_apply(self):
        cfg = load_config(None, overrides={"corpus": {"seed": 99}})
        assert cfg.corpus.seed == 99

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_config(tmp_path / "missing.toml")

    def test_run_dir_uses_hash_prefix(self, tmp_path):
        cfg = ExperimentConfig()
        assert cfg.run_dir(tmp_path).name == cfg.hash()[:12]


class TestAggregate:
    def test_matches_scripted_aggregator(self):
        values = [0.8403, 0.8528, 0.8278]
        mean, sd = aggregate(values)
        n = len(values)
        m = sum(values) / n
        v = sum((x - m) ** 2 for x in values) / (n - 1)
        assert mean == pytest.approx(m, rel=1e-12)
        assert sd == pytest.approx(np.sqrt(v), rel=1e-12)

    def test_single_value_sd_zero(self):
        assert aggregate([0.5]) == (0.5, 0.0)

    def test_format(self):
        assert format_percent(0.8403, 0.0125) == "84.03 ± 1.25"


class TestWriteMetrics:
    def test_round_trip(self, tmp_path):
        records = [
            MetricsRecord(tag="pretrained", tar_at_far={0.01: 0.75, 0.001: 0.5},
                          rank1=0.9, fnir_at_fpir={0.02: 0.3}, dprime=2.5, seed=7),
            MetricsRecord(tag="tuned", tar_at_far={0.01: 0.9}, rank1=0.95,
                          fnir_at_fpir={0.02: 0.2}, seed=7),
        ]
        path = tmp_path / "m.csv"
        write_metrics(records, path, config_hash="abc123", seed=7)
        meta, rows = read_csv(path)
        assert meta["config_hash"] == "abc123"
        assert len(rows) == 2
        assert float(rows[0]["tar_at_far_0.01"]) == 0.75
        assert float(rows[0]["rank1"]) == 0.9
        assert rows[1]["dprime"] == ""

    def test_zero_records_header_only(self, tmp_path):
        path = tmp_path / "empty.csv"
        write_metrics([], path, config_hash="x")
        meta, rows = read_csv(path)
        assert rows == []
        assert meta["config_hash"] == "x"


class TestWriteSweep:
    def test_row_count_and_aggregates(self, tmp_path):
        rows = [
            {"fraction": f, "seed": s, "sketch_photo_tar": 0.5 + 0.1 * f + 0.01 * s,
             "photo_photo_tar": 0.9 - 0.05 * f}
            for f in (0.25, 0.5, 0.75, 1.0)
            for s in (0, 1, 2)
        ]
        path = tmp_path / "sweep.csv"
        write_sweep(rows, path, config_hash="h")
        _, out = read_csv(path)
        assert len(out) == 4 * 3 + 4
        agg_rows = [r for r in out if r["seed"] == "mean±sd"]
        assert len(agg_rows) == 4
        assert "±" in agg_rows[0]["sketch_photo_tar"]
        per_seed = [r for r in out if r["seed"] != "mean±sd"]
        assert all(float(r["sketch_photo_tar"]) <= 1.0 for r in per_seed)

    def test_aggregate_values_match_oracle(self, tmp_path):
        rows = [{"fraction": 1.0, "seed": s, "tar": v}
                for s, v in enumerate((0.827, 0.8403, 0.8528))]
        write_sweep(rows, tmp_path / "s.csv")
        _, out = read_csv(tmp_path / "s.csv")
        mean, sd = aggregate([0.827, 0.8403, 0.8528])
        assert out[-1]["tar"] == format_percent(mean, sd)


class TestHistograms:
    def test_counts_partition_scores(self, tmp_path):
        rng = np.random.default_rng(0)
        scores = {"genuine": rng.uniform(-1, 1, 500), "imposter": rng.uniform(-1, 1, 300)}
        write_histograms(scores, tmp_path / "h.csv", bins=20)
        _, rows = read_csv(tmp_path / "h.csv")
        assert len(rows) == 20
        assert sum(int(r["genuine"]) for r in rows) == 500
        assert sum(int(r["imposter"]) for r in rows) == 300
