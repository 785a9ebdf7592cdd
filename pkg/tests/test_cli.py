import shutil

import numpy as np
import pytest

from mmjoint.artifacts import read_demand, read_flows, read_observations, read_params, write_demand
from mmjoint.cli import main
from mmjoint.fixtures import ND_DEMAND, build_toy_multimodal, nguyen_dupuis
from mmjoint.kv import read_kv, write_kv
from mmjoint.dnl import LoadingConfig, load
from mmjoint.network import load_network, write_network

TOY_Q = np.array([[150.0, 120.0], [90.0, 110.0]])


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """A toy bundle, its demand table and a short run configuration."""
    root = tmp_path_factory.mktemp("toy")
    net = build_toy_multimodal()
    write_network(net, root / "bundle")
    write_demand(root / "demand.tsv", net, TOY_Q)
    write_kv(root / "run.cfg", {"network": str(root / "bundle"), "truth": "simple", "demand": str(root / "demand.tsv"),
                                "iterations": 4, "eq_max_iterations": 60})
    return root


def generate(toy_run, out, seed=0, extra=None):
    cfg = toy_run / "run.cfg"
    if extra:
        cfg = out.parent / f"{out.name}.cfg"
        shutil.copy(toy_run / "run.cfg", cfg)
        with open(cfg, "a") as fh:
            for k, v in extra.items():
                fh.write(f"{k} = {v}\n")
    return main(["generate", "--config", str(cfg), "--out", str(out), "--seed", str(seed), "--quiet"])


def files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def generated(toy_run, tmp_path_factory):
    out = tmp_path_factory.mktemp("gen") / "data"
    assert generate(toy_run, out) == 0
    return out


def test_generate_layout(generated):
    for name in ("ground_truth/demand.tsv", "ground_truth/theta.tsv", "ground_truth/flows.tsv",
                 "ground_truth/convergence.tsv", "initial/demand.tsv", "initial/theta.tsv",
                 "observations/link_flow.tsv", "observations/pt_counts.tsv", "observations/travel_time.tsv",
                 "run.txt", "manifest.txt"):
        assert (generated / name).is_file(), name
    manifest = (generated / "manifest.txt").read_text()
    assert "config_hash" in manifest and "numpy" in manifest


def test_generated_files_parse_back(generated):
    run = read_kv(generated / "run.txt")
    net = load_network(run["network"])
    lc = LoadingConfig.for_network(net)
    q = read_demand(generated / "ground_truth" / "demand.tsv", net, lc.n_dep)
    np.testing.assert_array_equal(q, TOY_Q)
    theta = read_params(generated / "ground_truth" / "theta.tsv")
    assert theta.names[0] == "beta1_car" and len(theta) == 7
    f = read_flows(generated / "ground_truth" / "flows.tsv", net, lc.n_dep)
    out = load(net, f, lc)
    obs = read_observations(generated / "observations", net, out.pairs, lc.n_intervals)
    # observations equal the loading of the stored ground-truth flows
    np.testing.assert_allclose(obs.link_flow, out.x_c.ravel(), rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(obs.pt_counts, out.x_pt, rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(obs.travel_time, out.t_c.ravel(), rtol=1e-12)
    q0 = read_demand(generated / "initial" / "demand.tsv", net, lc.n_dep)
    assert np.all(q0 >= 0.5 * TOY_Q - 1e-9) and np.all(q0 <= 1.5 * TOY_Q + 1e-9)
    th0 = read_params(generated / "initial" / "theta.tsv")
    np.testing.assert_allclose(th0.values, theta.values * 1.1)


def test_generate_is_deterministic(toy_run, generated, tmp_path):
    assert generate(toy_run, tmp_path / "again") == 0
    assert files(tmp_path / "again") == files(generated)
    assert generate(toy_run, tmp_path / "other", seed=1) == 0
    assert files(tmp_path / "other")["initial/demand.tsv"] != files(generated)["initial/demand.tsv"]


def test_zero_demand_gives_zero_observations(toy_run, tmp_path):
    write_demand(tmp_path / "zero.tsv", build_toy_multimodal(), np.zeros((2, 2)))
    assert generate(toy_run, tmp_path / "z", extra={"demand": str(tmp_path / "zero.tsv")}) == 0
    for name, col in (("link_flow.tsv", 2), ("pt_counts.tsv", 4)):
        rows = (tmp_path / "z" / "observations" / name).read_text().splitlines()[1:]
        assert rows and all(float(r.split("\t")[col]) == 0.0 for r in rows)


def test_estimate_without_ground_truth(generated, tmp_path):
    data = tmp_path / "data"
    shutil.copytree(generated, data)
    shutil.rmtree(data / "ground_truth")  # estimation must not need it
    out = tmp_path / "est"
    assert main(["estimate", "--data", str(data), "--out", str(out), "--quiet"]) == 0
    for name in ("trace.csv", "fit_report.csv", "estimates_q.tsv", "estimates_theta.tsv", "wald_report.csv",
                 "scatter_flow.csv", "scatter_pt.csv", "scatter_tt.csv", "manifest.txt"):
        assert (out / name).is_file(), name
    trace = (out / "trace.csv").read_text().splitlines()
    assert len(trace) == 1 + 5
    fit = (out / "fit_report.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in fit[1:]] == ["flow", "pt", "tt"]
    wald = (out / "wald_report.csv").read_text().splitlines()[1:]
    assert sum(r.endswith(",combined") for r in wald) == 7


def test_estimate_outputs_parse_back(generated, tmp_path):
    out = tmp_path / "est"
    assert main(["estimate", "--data", str(generated), "--out", str(out), "--quiet"]) == 0
    net = build_toy_multimodal()
    q = read_demand(out / "estimates_q.tsv", net, 2)
    assert q.shape == (2, 2) and np.all(q >= 0)
    assert read_params(out / "estimates_theta.tsv").names == read_params(generated / "initial" / "theta.tsv").names
    pairs = np.loadtxt(out / "scatter_flow.csv", delimiter=",", skiprows=1)
    assert pairs.shape[1] == 2


def test_estimate_rerun_is_identical(generated, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["estimate", "--data", str(generated), "--out", str(a), "--quiet"]) == 0
    assert main(["estimate", "--data", str(generated), "--out", str(b), "--quiet"]) == 0
    assert files(a) == files(b)


def test_zero_iterations_report_the_start(generated, tmp_path):
    cfg = tmp_path / "zero.cfg"
    write_kv(cfg, {"iterations": 0})
    out = tmp_path / "est"
    assert main(["estimate", "--data", str(generated), "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    assert (out / "estimates_q.tsv").read_bytes() == (generated / "initial" / "demand.tsv").read_bytes()
    assert (out / "estimates_theta.tsv").read_bytes() == (generated / "initial" / "theta.tsv").read_bytes()


def test_select_single_round(generated, tmp_path):
    cfg = tmp_path / "k1.cfg"
    write_kv(cfg, {"rounds": 1, "iterations": 2})
    out = tmp_path / "sel"
    assert main(["select", "--data", str(generated), "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    rows = (out / "selection_history.csv").read_text().splitlines()
    assert rows[0] == "round,removed,remaining" and len(rows) == 2


def test_divergence_exits_with_3(generated, tmp_path, capsys):
    cfg = tmp_path / "wild.cfg"
    write_kv(cfg, {"optimizer": "plain", "lr_demand": 5e5, "lr_params": 50.0, "iterations": 40})
    rc = main(["estimate", "--data", str(generated), "--config", str(cfg), "--out", str(tmp_path / "x"), "--quiet"])
    assert rc == 3
    assert "numerical abort" in capsys.readouterr().err


def test_invalid_inputs_exit_with_2(toy_run, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    write_kv(bad, {"no_such_key": 1})
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "g")]) == 2
    assert "unknown config keys" in capsys.readouterr().err
    assert main(["estimate", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "e")]) == 2
    assert main(["validate", "--network", str(tmp_path / "nowhere")]) == 2
    # ND fixture demand does not fit the toy's two O-D pairs
    nodemand = tmp_path / "nd.cfg"
    write_kv(nodemand, {"network": str(toy_run / "bundle")})
    assert main(["generate", "--config", str(nodemand), "--out", str(tmp_path / "g2")]) == 2
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_validate_reports_problems(toy_run, tmp_path, capsys):
    assert main(["validate", "--network", str(toy_run / "bundle")]) == 0
    assert "network is valid" in capsys.readouterr().out
    broken = tmp_path / "broken"
    shutil.copytree(toy_run / "bundle", broken)
    text = (broken / "paths.tsv").read_text().splitlines()
    text[1] = text[1].replace("D:", "D:NOPE", 1)
    (broken / "paths.tsv").write_text("\n".join(text) + "\n")
    assert main(["validate", "--network", str(broken)]) == 2


def test_dnl_command_writes_loading(toy_run, tmp_path):
    out = tmp_path / "dnl"
    rc = main(["dnl", "--network", str(toy_run / "bundle"), "--demand", str(toy_run / "demand.tsv"),
               "--trajectory", "--out", str(out)])
    assert rc == 0
    for name in ("link_flow.tsv", "pt_counts.tsv", "travel_time.tsv", "path_flows.tsv", "trajectory.tsv"):
        assert (out / name).is_file(), name
    net = load_network(toy_run / "bundle")
    f = read_flows(out / "path_flows.tsv", net, 2)
    assert f.sum() == pytest.approx(TOY_Q.sum())


def test_nd_generate_has_one_row_per_link_and_interval(tmp_path):
    cfg = tmp_path / "nd.cfg"
    write_kv(cfg, {"eq_max_iterations": 2})
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "nd"), "--quiet"]) == 0
    n_int = LoadingConfig.for_network(nguyen_dupuis()).n_intervals
    rows = (tmp_path / "nd" / "observations" / "link_flow.tsv").read_text().splitlines()[1:]
    assert len(rows) == 19 * n_int
    q = read_demand(tmp_path / "nd" / "ground_truth" / "demand.tsv", nguyen_dupuis(), ND_DEMAND.shape[1])
    np.testing.assert_array_equal(q, ND_DEMAND)
