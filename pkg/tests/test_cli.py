import json
from pathlib import Path

import pytest

from sti_atlas.cli import ConfigError, load_config, main, validate_for_stages

FIXTURE_DIR = Path(__file__).parent / "fixtures" / "e2e"


@pytest.fixture
def fixture_config():
    return FIXTURE_DIR / "pipeline.toml"


class TestConfig:
    def test_loads_fixture_config(self, fixture_config):
        config = load_config(fixture_config)
        assert config.country == "DK"
        assert config.year_range == (2014, 2019)
        assert config.seed == 42
        assert config.k == 6

    def test_missing_seed_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text(
            '[pipeline]\ncountry = "DK"\nyear_start = 2014\nyear_end = 2019\nout_dir = "o"\n'
        )
        with pytest.raises(ConfigError, match="pipeline.seed"):
            load_config(path)

    def test_seed_override_allows_missing(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text(
            '[pipeline]\ncountry = "DK"\nyear_start = 2014\nyear_end = 2019\nout_dir = "o"\n'
        )
        assert load_config(path, seed_override=7).seed == 7

    def test_inverted_year_range_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text(
            '[pipeline]\ncountry = "DK"\nyear_start = 2019\nyear_end = 2014\nout_dir = "o"\nseed = 1\n'
        )
        with pytest.raises(ConfigError, match="year_start"):
            load_config(path)

    def test_unknown_source_rejected(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text(
            '[pipeline]\ncountry = "DK"\nyear_start = 2014\nyear_end = 2019\nout_dir = "o"\nseed = 1\n'
            '[harvest]\nsources = ["scopus"]\n'
        )
        with pytest.raises(ConfigError, match="scopus"):
            load_config(path)

    def test_missing_vocab_path_names_field(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text(
            '[pipeline]\ncountry = "DK"\nyear_start = 2014\nyear_end = 2019\nout_dir = "o"\nseed = 1\n'
        )
        config = load_config(path)
        with pytest.raises(ConfigError, match="vocab.path"):
            validate_for_stages(config, ["tag"])

    def test_nonexistent_vocab_file_names_field(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text(
            '[pipeline]\ncountry = "DK"\nyear_start = 2014\nyear_end = 2019\nout_dir = "o"\nseed = 1\n'
            '[vocab]\npath = "missing.json"\n'
        )
        config = load_config(path)
        with pytest.raises(ConfigError, match="vocab.path"):
            validate_for_stages(config, ["tag"])

    def test_cache_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("STI_ATLAS_CACHE", str(tmp_path / "cachedir"))
        config = load_config(FIXTURE_DIR / "pipeline.toml")
        assert config.cache_dir == tmp_path / "cachedir"


class TestMain:
    def test_tag_with_missing_vocab_exits_1(self, tmp_path, capsys):
        path = tmp_path / "c.toml"
        path.write_text(
            '[pipeline]\ncountry = "DK"\nyear_start = 2014\nyear_end = 2019\nout_dir = "o"\nseed = 1\n'
        )
        assert main(["tag", "--config", str(path)]) == 1
        assert "vocab.path" in capsys.readouterr().err

    def test_dry_run_writes_nothing(self, tmp_path, capsys):
        out = tmp_path / "out"
        code = main(
            ["all", "--config", str(FIXTURE_DIR / "pipeline.toml"), "--out", str(out), "--dry-run"]
        )
        assert code == 0
        assert not out.exists()
        assert "plan" in capsys.readouterr().out

    def test_runtime_error_exits_2(self, tmp_path, capsys):
        # `tag` before `harvest`: the corpus file does not exist yet.
        out = tmp_path / "out"
        code = main(
            ["tag", "--config", str(FIXTURE_DIR / "pipeline.toml"), "--out", str(out)]
        )
        assert code == 2

    def test_full_pipeline_and_stage_rerun(self, tmp_path, capsys):
        out = tmp_path / "out"
        config = str(FIXTURE_DIR / "pipeline.toml")
        assert main(["all", "--config", config, "--out", str(out)]) == 0
        report = out / "report"
        expected = {
            "sdg_shares.csv",
            "top_affiliations.csv",
            "panel_source_counts.csv",
            "topic_panel_cooccurrence.csv",
            "tsne_scatter.csv",
            "topic_label_candidates.csv",
            "manifest.json",
        }
        assert {p.name for p in report.iterdir()} == expected

        corpus_lines = (out / "corpus.jsonl").read_text().strip().splitlines()
        assert len(corpus_lines) == 200

        manifest = json.loads((report / "manifest.json").read_text())
        assert set(manifest["inputs"]) == {
            "corpus",
            "tags",
            "vectors",
            "topic_model",
            "predictions",
        }
        assert manifest["params"]["seed"] == 42

        # Each stage re-runs from its predecessors' files.
        before = (out / "tags.jsonl").read_bytes()
        assert main(["tag", "--config", config, "--out", str(out)]) == 0
        assert (out / "tags.jsonl").read_bytes() == before
        assert main(["report", "--config", config, "--out", str(out)]) == 0


class TestLiveHarvest:
    def test_live_mode_fetches_both_apis_with_stub_transport(self, tmp_path, monkeypatch):
        import json as jsonlib

        openaire_page = (
            "<response><header><total>1</total></header><results><result>"
            "<objIdentifier>oai:live:1</objIdentifier>"
            "<title>Live climate change result</title>"
            "<description>climate change observed in live fetch</description>"
            "<dateofacceptance>2016-02-01</dateofacceptance>"
            '<rels><rel><legalname>Aarhus University</legalname><country classid="DK"/></rel></rels>'
            "</result></results></response>"
        )
        openaire_empty = (
            "<response><header><total>1</total></header><results></results></response>"
        )

        def fake_transport(url, params):
            if "openalex" in url:
                work = {
                    "id": "https://openalex.org/W-live-1",
                    "title": "Live wind energy work",
                    "publication_year": 2015,
                    "abstract_inverted_index": {"wind": [0], "energy": [1]},
                    "authorships": [
                        {"institutions": [{"display_name": "DTU", "country_code": "DK"}]}
                    ],
                }
                body = jsonlib.dumps({"meta": {"next_cursor": None}, "results": [work]})
                return 200, body.encode()
            if params.get("page", "1") == "1":
                return 200, openaire_page.encode()
            return 200, openaire_empty.encode()

        monkeypatch.setattr("sti_atlas.harvest._requests_transport", fake_transport)

        config_path = tmp_path / "live.toml"
        config_path.write_text(
            "[pipeline]\n"
            'country = "DK"\nyear_start = 2014\nyear_end = 2019\n'
            f'out_dir = "{tmp_path / "out"}"\nseed = 1\n'
            "[harvest]\n"
            'sources = ["openalex", "openaire"]\nlive = true\n'
            f'cache_dir = "{tmp_path / "cache"}"\n'
        )
        assert main(["harvest", "--config", str(config_path)]) == 0

        out = tmp_path / "out"
        corpus_lines = (out / "corpus.jsonl").read_text().strip().splitlines()
        ids = {jsonlib.loads(line)["id"] for line in corpus_lines}
        assert ids == {"W-live-1", "oai:live:1"}

        provenance = jsonlib.loads((out / "provenance.json").read_text())
        assert "query" in provenance["OPENALEX"]
        assert "fetched_at" in provenance["OPENALEX"]
        assert provenance["OPENAIRE"]["query"]["windows"] == 1
        assert (tmp_path / "cache" / "openalex").exists()  # raw payloads cached
