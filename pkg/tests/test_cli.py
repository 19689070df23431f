"""
Command-line tests, run in-process through main()
命令行测试
"""

import json

import numpy as np
import pandas as pd
import pytest

from kinetic_vi.cli import main, resolve_threads
from kinetic_vi.data_io import load_dataset
from kinetic_vi.errors import UsageError


@pytest.fixture(autouse=True)
def single_thread(monkeypatch):
    monkeypatch.setenv("SKM_THREADS", "1")


def simulate(out, *extra):
    code = main(["simulate", "--m", "4", "--t", "12", "--seed", "3", "--out", str(out), *extra])
    assert code == 0
    return out


def read_manifest(directory):
    with open(directory / "manifest.json", encoding="utf-8") as f:
        return json.load(f)


def test_simulate_writes_dataset_and_manifest(tmp_path):
    """测试模拟命令输出数据集与清单"""
    data = simulate(tmp_path / "data")
    dataset = load_dataset(data)
    assert dataset.observations.shape == (12, 4)
    assert dataset.truth.shape == (12, 4)
    assert dataset.params is not None
    manifest = read_manifest(data)
    assert manifest["command"] == "simulate"
    assert manifest["seeds"] == {"simulation": 3}
    assert set(manifest["diagnostics"]["outputs"]) >= {"contacts", "observations", "truth", "params"}


def test_simulate_is_reproducible(tmp_path):
    """测试相同种子输出相同文件"""
    a = read_manifest(simulate(tmp_path / "a"))
    b = read_manifest(simulate(tmp_path / "b"))
    assert a["diagnostics"]["outputs"] == b["diagnostics"]["outputs"]


def test_simulate_hazard_overflow_exits_2(tmp_path):
    """测试风险溢出返回退出码 2"""
    code = main(["simulate", "--m", "10", "--t", "5", "--density", "8", "--c2", "0.5", "--out", str(tmp_path)])
    assert code == 2


def test_usage_errors_exit_1(tmp_path):
    """测试参数错误返回退出码 1"""
    data = simulate(tmp_path / "data")
    assert main(["infer", "--dir", str(data), "--method", "nope", "--out", str(tmp_path / "o")]) == 1
    assert main(["infer", "--dir", str(data), "--damping", "1.5", "--out", str(tmp_path / "o")]) == 1
    assert main(["learn", "--dir", str(data), "--init-c", "recovery", "--out", str(tmp_path / "o")]) == 1
    assert main([]) == 1
    assert main(["--log-level", "loud", "simulate", "--out", str(tmp_path / "o")]) == 1


def test_vi_matches_exact_for_one_individual(tmp_path):
    """测试单个体时变分推断与精确推断一致"""
    data = tmp_path / "data"
    assert main(["simulate", "--m", "1", "--t", "15", "--seed", "2", "--out", str(data)]) == 0
    assert main(["infer", "--dir", str(data), "--method", "viskm", "--tol", "1e-12", "--out", str(tmp_path / "vi")]) == 0
    assert main(["infer", "--dir", str(data), "--method", "exact", "--out", str(tmp_path / "ex")]) == 0
    vi = pd.read_csv(tmp_path / "vi" / "posterior.csv")
    ex = pd.read_csv(tmp_path / "ex" / "posterior.csv")
    assert list(vi.columns) == ["t", "m", "p0", "p1"]
    assert np.allclose(vi[["p0", "p1"]].to_numpy(), ex[["p0", "p1"]].to_numpy(), atol=1e-8)
    scores = pd.read_csv(tmp_path / "vi" / "scores.csv")
    assert len(scores) == 15


def test_exact_beyond_state_cap_exits_2(tmp_path):
    """测试精确推断超出状态空间上限"""
    data = tmp_path / "data"
    assert main(["simulate", "--m", "21", "--t", "3", "--out", str(data)]) == 0
    assert main(["infer", "--dir", str(data), "--method", "exact", "--out", str(tmp_path / "o")]) == 2


@pytest.mark.parametrize("method, extra", [
    ("viskm", []),
    ("gibbs", ["--sweeps", "40"]),
    ("pf", ["--particles", "200"]),
])
def test_infer_with_mask_then_eval(tmp_path, method, extra):
    """测试掩码推断后评估"""
    data = simulate(tmp_path / "data")
    run = tmp_path / "run"
    code = main([
        "infer", "--dir", str(data), "--method", method, "--task", "smooth",
        "--mask-fraction", "0.4", "--seed", "1", "--out", str(run), *extra,
    ])
    assert code == 0
    assert (run / "mask-ledger.jsonl").exists()
    scores = pd.read_csv(run / "scores.csv")
    assert list(scores.columns) == ["t", "m", "score"]
    assert scores["score"].between(0, 1).all()
    manifest = read_manifest(run)
    assert manifest["seeds"]["mask"] == 1

    dataset = load_dataset(data)
    labels = dataset.truth[scores["t"].to_numpy() - 1, scores["m"].to_numpy()]
    if labels.min() == labels.max():
        pytest.skip("masked cells hold a single class")
    code = main([
        "eval", "--scores", str(run / "scores.csv"), "--truth", str(data / "truth.jsonl"),
        "--posterior", str(run / "posterior.csv"), "--out", str(run),
    ])
    assert code == 0
    roc = pd.read_csv(run / "roc.csv")
    assert roc["fpr"].iloc[0] == 0 and roc["tpr"].iloc[-1] == 1
    counts = pd.read_csv(run / "counts.csv")
    assert list(counts["truth"]) == list(dataset.truth.sum(axis=1))


def test_predict_task_uses_filtering(tmp_path):
    """测试预测任务使用滤波模式"""
    data = simulate(tmp_path / "data")
    run = tmp_path / "run"
    assert main(["infer", "--dir", str(data), "--task", "predict", "--seed", "2", "--out", str(run)]) == 0
    manifest = read_manifest(run)
    assert manifest["arguments"]["task"] == "predict"
    scores = pd.read_csv(run / "scores.csv")
    assert (scores["t"] >= 2).all()


def test_learn_flags_degenerate_data(tmp_path):
    """测试全部缺失观测时学习被标记"""
    data = simulate(tmp_path / "data")
    with open(data / "observations.jsonl", "w", encoding="utf-8") as f:
        f.write(json.dumps({"M": 4, "T": 12, "S": 2}) + "\n")
    out = tmp_path / "learn"
    code = main(["learn", "--dir", str(data), "--max-em-iters", "2", "--iters", "5", "--out", str(out)])
    assert code == 0
    assert "degenerate" in read_manifest(out)["flags"]
    trace = pd.read_csv(out / "rates_trace.csv")
    assert trace.columns[0] == "iteration"
    with open(out / "rates.json", encoding="utf-8") as f:
        assert set(json.load(f)) == {"recovery", "contact", "outside"}


def test_learn_with_initial_rates(tmp_path):
    """测试指定初始速率"""
    data = simulate(tmp_path / "data")
    out = tmp_path / "learn"
    code = main([
        "learn", "--dir", str(data), "--init-c", "recovery=0.2", "contact=0.02", "outside=0.01",
        "--max-em-iters", "2", "--out", str(out),
    ])
    assert code == 0
    trace = pd.read_csv(out / "rates_trace.csv")
    assert trace["recovery"].iloc[0] == pytest.approx(0.2)


def test_bench_writes_table(tmp_path):
    """测试基准命令输出"""
    out = tmp_path / "bench"
    code = main(["bench", "--sizes", "4", "8", "--iters", "2", "--t", "10", "--repeats", "1", "--out", str(out)])
    assert code == 0
    frame = pd.read_csv(out / "bench.csv")
    assert list(frame["M"]) == [4, 8]
    assert read_manifest(out)["diagnostics"]["r_squared"] is not None
    assert main(["bench", "--sizes", "8", "4", "--out", str(out)]) == 2


def test_infer_without_truth_still_scores_every_cell(tmp_path):
    """测试数据集无真值时仍输出全部评分"""
    data = simulate(tmp_path / "data")
    (data / "truth.jsonl").unlink()
    run = tmp_path / "run"
    assert main(["infer", "--dir", str(data), "--out", str(run)]) == 0
    scores = pd.read_csv(run / "scores.csv")
    assert list(scores.columns) == ["t", "m", "score"]
    assert len(scores) == 12 * 4
    assert list(scores[["t", "m"]].iloc[1]) == [1, 1]


@pytest.mark.parametrize("method, extra", [("gibbs", ["--sweeps", "3"]), ("pf", ["--particles", "50"])])
def test_samplers_run_on_default_simulation(tmp_path, method, extra):
    """测试默认模拟参数下采样基线正常退出"""
    data = tmp_path / "data"
    assert main(["simulate", "--seed", "0", "--out", str(data)]) == 0
    code = main(["infer", "--dir", str(data), "--method", method, "--out", str(tmp_path / method), *extra])
    assert code == 0


def test_bench_with_baselines(tmp_path):
    """测试基准命令附带采样基线计时"""
    out = tmp_path / "bench"
    code = main([
        "bench", "--sizes", "4", "--iters", "2", "--t", "6", "--repeats", "1",
        "--baselines", "gibbs", "pf", "--sweeps", "10", "--timed-sweeps", "2", "--particles", "20",
        "--out", str(out),
    ])
    assert code == 0
    frame = pd.read_csv(out / "bench.csv")
    assert {"vi_total_seconds", "gibbs_seconds", "pf_seconds", "gibbs_speedup", "pf_speedup"} <= set(frame.columns)
    assert set(read_manifest(out)["diagnostics"]["speedups"]) == {"gibbs", "pf"}
    assert main(["bench", "--sizes", "4", "--baselines", "mcmc", "--out", str(out)]) == 1
    assert main(["bench", "--sizes", "4", "--sweeps", "5", "--timed-sweeps", "10", "--out", str(out)]) == 1


def test_config_file(tmp_path):
    """测试配置文件"""
    data = simulate(tmp_path / "data")
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"vi": {"max_iters": 1, "tol": 1e-15}}), encoding="utf-8")
    run = tmp_path / "run"
    assert main(["--config", str(config), "infer", "--dir", str(data), "--out", str(run)]) == 0
    manifest = read_manifest(run)
    assert manifest["diagnostics"]["iterations"] == 1

    config.write_text("{not json", encoding="utf-8")
    assert main(["--config", str(config), "infer", "--dir", str(data), "--out", str(run)]) == 2


def test_resolve_threads(monkeypatch):
    """测试线程数解析顺序"""
    monkeypatch.setenv("SKM_THREADS", "3")
    assert resolve_threads(8) == 3
    monkeypatch.delenv("SKM_THREADS")
    assert resolve_threads(2) == 2
    assert resolve_threads(None) >= 1
    with pytest.raises(UsageError):
        resolve_threads(0)
    monkeypatch.setenv("SKM_THREADS", "many")
    with pytest.raises(UsageError):
        resolve_threads(None)
