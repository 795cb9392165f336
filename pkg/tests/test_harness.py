import json
import shutil

import numpy as np
import pytest

from psec.diffusion import build_schedule
from psec.harness import pipelines as pl
from psec.harness.cli import EXIT_CONFIG, EXIT_RUN, main
from psec.harness.config import ConfigError, RunConfig, load_config, parse_override
from psec.harness.pipelines import (
    PipelineError,
    cmd_compare,
    cmd_dump_features,
    cmd_eval,
    cmd_gen_data,
    cmd_pretrain,
    cmd_train_composer,
    cmd_train_skill,
)
from psec.harness.regimes import regime_config
from psec.harness.report import RunReport, read_report, report_hash
from psec.lora import init_adapter, train_skill
from psec.skills import load_library

TINY = dict(hidden=(16, 16), critic_hidden=(16, 16), episodes=12, pretrain_steps=30, skill_steps=20,
            composer_steps=20, critic_steps=20, batch=32, eval_episodes=4, feature_samples=16, rank=2)


def _cfg(tmp_path, **kw):
    base = dict(TINY, dataset=str(tmp_path / "d.ndjson"), library=str(tmp_path / "lib"), out=str(tmp_path / "out"))
    return RunConfig().with_(**{**base, **kw})


@pytest.fixture
def two_skill_lib(tmp_path):
    cfg = _cfg(tmp_path)
    cmd_gen_data(cfg)
    cmd_pretrain(cfg)
    cmd_train_skill(cfg.with_(skill_name="a"))
    cmd_train_skill(cfg.with_(skill_name="b", weighting="reward"))
    return cfg


def test_config_overrides_and_types(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3, "hidden": [32, 16]}))
    cfg = load_config(p, ["seed=5", "modes=parameter,noise", "lr=1e-3", "task=hold", "ranks=4"])
    assert cfg.seed == 5 and cfg.hidden == (32, 16) and cfg.modes == ("parameter", "noise")
    assert cfg.lr == 1e-3 and cfg.task == "hold" and cfg.ranks == (4,)
    assert parse_override("skill_name=x=y") == ("skill_name", "x=y")


@pytest.mark.parametrize("bad", [["nope=1"], ["tau=1.0"], ["task=moon"], ["mode=blend"], ["lr=0"], ["seed"],
                                 ["pretrain_steps=-1"], ["policy=other"]])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        load_config(None, bad)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    p = tmp_path / "c.json"
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(p)


def test_report_hash_ignores_wall_time():
    a = RunReport("x", {"k": 1}, {"p": [1.0, 2.0]}, {"m": 0.5}, wall_time=1.0)
    b = RunReport("x", {"k": 1}, {"p": [1.0, 2.0]}, {"m": 0.5}, wall_time=99.0)
    c = RunReport("x", {"k": 1}, {"p": [1.0, 2.0]}, {"m": 0.6}, wall_time=1.0)
    assert a.hash == b.hash != c.hash
    assert report_hash(a.to_dict()) == a.hash


def test_pipeline_reports_written(tmp_path):
    cfg = _cfg(tmp_path)
    rep = cmd_gen_data(cfg)
    assert rep.metrics["episodes"] == 12
    disk = read_report(tmp_path / "out" / "gen-data.json")
    assert disk["hash"] == rep.hash == report_hash(disk)


def test_pretrain_zero_steps(tmp_path):
    cfg = _cfg(tmp_path, pretrain_steps=0)
    cmd_gen_data(cfg)
    rep = cmd_pretrain(cfg)
    assert rep.phases["pretrain"] == [] and rep.metrics["loss_end"] is None
    assert load_library(cfg.library).names() == []


def test_missing_and_empty_dataset(tmp_path):
    cfg = _cfg(tmp_path)
    with pytest.raises(PipelineError):
        cmd_pretrain(cfg)
    with pytest.raises(PipelineError):
        cmd_gen_data(cfg.with_(episodes=0))
    (tmp_path / "d.ndjson").write_text("")
    with pytest.raises(PipelineError):
        cmd_pretrain(cfg)


def test_bc_weighting_matches_unit_weights(tmp_path):
    cfg = _cfg(tmp_path)
    cmd_gen_data(cfg)
    cmd_pretrain(cfg)
    cmd_train_skill(cfg.with_(skill_name="a"))
    lib = load_library(cfg.library)
    # the same adapter trained directly with explicit unit weights
    data = pl.load_dataset(cfg.dataset)
    rng = pl._rng(cfg, pl._SKILL, pl._name_key("a"), cfg.rank)
    ad = init_adapter(lib.base.spec, cfg.rank, rng.split(0), cfg.scale)
    ad, _ = train_skill(lib.base, ad, build_schedule(cfg.T), data.s, data.a, np.ones(len(data)), cfg.skill_steps,
                        cfg.skill_lr, cfg.batch, rng.split(1))
    got = lib.get("a").adapter.params()
    assert all(np.allclose(got[k], v, rtol=0, atol=1e-12) for k, v in ad.params().items())


def test_train_skill_duplicate_and_critic_artifact(two_skill_lib):
    cfg = two_skill_lib
    lib = load_library(cfg.library)
    assert lib.names() == ["a", "b"]
    assert lib.artifact("b").kind == "critic"
    assert lib.get("b").provenance["weighting"] == "reward"
    with pytest.raises(PipelineError):
        cmd_train_skill(cfg.with_(skill_name="a"))


def test_composer_and_eval(two_skill_lib):
    cfg = two_skill_lib
    rep = cmd_train_composer(cfg.with_(mode="noise"))
    assert rep.metrics["skills"] == ["a", "b"] and len(rep.phases["composer"]) == cfg.composer_steps
    trace = open(f"{cfg.out}/composer-alpha.csv").read().splitlines()
    assert trace[0].split(",")[-2:] == ["alpha_a", "alpha_b"]
    ev = cmd_eval(cfg.with_(policy="composer"))
    assert 0 <= ev.metrics["success_rate"] <= 1 and ev.metrics["episodes"] == cfg.eval_episodes


def test_fixed_zero_alphas_equal_base_eval(two_skill_lib):
    cfg = two_skill_lib
    base = cmd_eval(cfg.with_(policy="base"))
    fixed = cmd_eval(cfg.with_(policy="fixed", fixed_alphas=(0.0, 0.0)))
    assert base.metrics == fixed.metrics


def test_compare_rows(two_skill_lib):
    cfg = two_skill_lib.with_(modes=("parameter", "fixed"), ranks=(2, 1))
    rep = cmd_compare(cfg)
    rows = rep.metrics["rows"]
    assert [(r["mode"], r["rank"]) for r in rows] == [("parameter", 2), ("fixed", 2), ("parameter", 1), ("fixed", 1)]
    base = cmd_eval(cfg.with_(policy="base")).metrics["normalized_return"]
    assert all(r["normalized_return"] == base for r in rows if r["mode"] == "fixed")
    table = open(f"{cfg.out}/compare.csv").read().splitlines()
    assert len(table) == 1 + len(rows)


def test_compare_needs_two_skills(tmp_path):
    cfg = _cfg(tmp_path)
    cmd_gen_data(cfg)
    cmd_pretrain(cfg)
    cmd_train_skill(cfg.with_(skill_name="a"))
    with pytest.raises(PipelineError):
        cmd_compare(cfg)


def test_composer_without_skills(tmp_path):
    cfg = _cfg(tmp_path)
    cmd_gen_data(cfg)
    cmd_pretrain(cfg)
    with pytest.raises(PipelineError):
        cmd_train_composer(cfg)
    with pytest.raises(PipelineError):
        cmd_eval(cfg.with_(eval_episodes=0))


def test_dump_features(two_skill_lib):
    cfg = two_skill_lib
    rep = cmd_dump_features(cfg)
    assert rep.metrics["rows"] == cfg.feature_samples * 2 and rep.metrics["width"] == 16
    lines = open(f"{cfg.out}/features.csv").read().splitlines()
    assert len(lines) == 1 + cfg.feature_samples * 2
    assert len(lines[0].split(",")) == 2 + 16 + 2 + 2
    with pytest.raises(PipelineError):
        cmd_dump_features(cfg.with_(feature_layer=9))


def _cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_error_codes(tmp_path, capsys):
    code, _, err = _cli(capsys, "pretrain", "--set", "bogus=1")
    assert code == EXIT_CONFIG and json.loads(err)["error"] == "ConfigError"
    code, _, err = _cli(capsys, "pretrain", "--set", f"dataset={tmp_path / 'none.ndjson'}")
    assert code == EXIT_RUN and json.loads(err)["verb"] == "pretrain"


def test_cli_skills_ls_add_rm(two_skill_lib, tmp_path, capsys):
    cfg = two_skill_lib
    lib = f"library={cfg.library}"
    code, out, _ = _cli(capsys, "skills", "ls", "--set", lib)
    assert code == 0 and [s["name"] for s in json.loads(out)["skills"]] == ["a", "b"]
    assert _cli(capsys, "skills", "rm", "a", "--set", lib)[0] == 0
    assert load_library(cfg.library).names() == ["b"]
    assert _cli(capsys, "skills", "rm", "a", "--set", lib)[0] == EXIT_RUN
    # copy a skill in from a sibling library on the same base
    other = tmp_path / "lib2"
    shutil.copytree(cfg.library, other)
    assert _cli(capsys, "skills", "add", str(other), "b", "--as", "b2", "--set", lib)[0] == 0
    assert load_library(cfg.library).names() == ["b", "b2"]


def test_cli_runs_are_deterministic(tmp_path, capsys, monkeypatch):
    sets = ["hidden=16,16", "episodes=6", "pretrain_steps=20", "skill_steps=10", "composer_steps=10", "batch=16",
            "eval_episodes=3", "rank=2", "skill_name=a", "feature_samples=8"]
    args = [x for s in sets for x in ("--set", s)]
    verbs = (["gen-data"], ["pretrain"], ["train-skill"], ["train-composer"], ["eval", "--set", "policy=composer"],
             ["dump-features"])
    hashes = []
    for run in ("one", "two"):
        (tmp_path / run).mkdir()
        monkeypatch.chdir(tmp_path / run)
        row = []
        for verb in verbs:
            code, out, _ = _cli(capsys, *verb, *args)
            assert code == 0
            row.append(json.loads(out)["hash"])
        hashes.append(row)
    assert hashes[0] == hashes[1]


def test_regime_config_precedence():
    cfg = regime_config("safety", {"skill_steps": 7})
    assert cfg.skill_steps == 7 and cfg.filter_top == 30
    with pytest.raises(KeyError):
        regime_config("nope")
