import json

import numpy as np
import pytest

from smodice import cli, envs
from smodice.datasets import TrajectoryDataset
from smodice.solver import SmodiceSolution


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def figure2a_files(workdir):
    data, expert = workdir / "a.jsonl", workdir / "a_expert.jsonl"
    assert run("gen-data", "--env", "figure2a", "--episodes", 2000, "--seed", 0, "--out", data) == 0
    assert run("gen-data", "--env", "figure2a", "--policy", "expert", "--episodes", 1, "--out", expert) == 0
    return data, expert


def test_gen_data_summary_and_determinism(workdir, capsys):
    a, b = workdir / "x.jsonl", workdir / "y.jsonl"
    assert run("gen-data", "--env", "figure2a", "--episodes", 300, "--seed", 4, "--out", a) == 0
    out = capsys.readouterr().out
    assert "coverage     100.0% of 9 reachable states" in out
    assert run("gen-data", "--env", "figure2a", "--episodes", 300, "--seed", 4, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    meta = json.loads((workdir / "x.jsonl.meta.json").read_text())
    assert meta["env"] == "figure2a" and meta["seed"] == 4


@pytest.mark.parametrize("episodes", ["0", "-3", "abc"])
def test_bad_episode_count_is_usage_error(workdir, episodes):
    with pytest.raises(SystemExit) as info:
        run("gen-data", "--env", "figure2a", "--episodes", episodes, "--out", workdir / "z.jsonl")
    assert info.value.code == cli.EXIT_INVALID


def test_unknown_env_exit_2(workdir):
    assert run("gen-data", "--env", "nowhere", "--episodes", 1, "--out", workdir / "z.jsonl") == 2


def test_io_failure_exit_3(workdir):
    assert run("gen-data", "--env", "figure2a", "--episodes", 1, "--out", workdir / "no" / "dir.jsonl") == 3
    assert run("solve", "--data", workdir / "missing.jsonl", "--examples", workdir / "m.json",
               "--out", workdir / "s.json") == 3


def test_closed_form_kl_exit_2(figure2a_files, workdir):
    data, expert = figure2a_files
    code = run("solve", "--data", data, "--expert", expert, "--method", "closed-form",
               "--divergence", "kl", "--out", workdir / "s.json")
    assert code == 2


def test_divergence_exit_4(figure2a_files, workdir):
    data, expert = figure2a_files
    code = run("solve", "--data", data, "--expert", expert, "--method", "iterative",
               "--lr", "1e6", "--out", workdir / "s.json")
    assert code == 4


def test_malformed_dataset_exit_2(workdir):
    bad = workdir / "bad.jsonl"
    bad.write_text('{"states": [0]}\n')
    assert run("solve", "--data", bad, "--examples", bad, "--out", workdir / "s.json") == 2


def test_figure2a_end_to_end(figure2a_files, workdir, capsys):
    data, expert = figure2a_files
    sol = workdir / "a_sol.json"
    stages = workdir / "stages"
    assert run("solve", "--data", data, "--expert", expert, "--out", sol, "--dump-stage", stages) == 0
    assert "objective" in capsys.readouterr().out
    assert (stages / "reward.json").exists() and (stages / "v_star.json").exists()
    report = workdir / "a_eval.json"
    assert run("eval", "--env", "figure2a", "--solution", sol, "--brute-force", "--out", report) == 0
    metrics = json.loads(report.read_text())
    assert metrics["gap_to_brute_force"] <= 1e-3
    assert run("render", "--env", "figure2a", "--solution", sol) == 0
    text = capsys.readouterr().out
    rows = [r.split() for r in text.splitlines()]
    # cardinal moves only, ending at the goal
    assert rows[2][2] == "*"
    assert not any(g in text for g in "↗↘↙↖")


def test_figure2b_examples(workdir, capsys):
    data, examples, sol = workdir / "b.jsonl", workdir / "b_ex.json", workdir / "b_sol.json"
    assert run("gen-data", "--env", "figure2b", "--episodes", 3000, "--seed", 1, "--out", data) == 0
    assert run("gen-examples", "--env", "figure2b", "--count", 3, "--out", examples) == 0
    assert json.loads(examples.read_text())["kind"] == "examples"
    assert run("solve", "--data", data, "--examples", examples, "--out", sol) == 0
    capsys.readouterr()
    assert run("eval", "--env", "figure2b", "--solution", sol, "--json") == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["success_state_mass"] >= 0.9


def test_eval_expert_policy(capsys):
    assert run("eval", "--env", "figure2a", "--expert-policy") == 0
    out = capsys.readouterr().out
    value = float(out.split("state_kl_to_expert")[1].split()[0])
    assert value <= 1e-9
    assert run("eval", "--env", "figure2b", "--expert-policy") == 2


def test_render_svg_and_shading(workdir, capsys):
    out = workdir / "expert.svg"
    assert run("render", "--env", "figure2a", "--expert-policy", "--svg", "--shade", "--out", out) == 0
    assert out.read_text().startswith("<svg")
    assert run("render", "--env", "figure2a", "--expert-policy") == 0
    assert "↘" in capsys.readouterr().out


def test_study_command(workdir, capsys):
    out = workdir / "study.json"
    assert run("study", "--sizes", "1e3,4e3,1.6e4,6.4e4", "--seeds", 20, "--workers", 2, "--out", out) == 0
    report = json.loads(out.read_text())
    assert -0.7 <= report["slope"] <= -0.3
    assert "log-log slope" in capsys.readouterr().out


def test_help_documents_every_flag(capsys):
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    for name, p in sub.choices.items():
        for action in p._actions:
            assert action.help, f"{name}: {action.option_strings} lacks help"
