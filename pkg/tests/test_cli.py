import csv

import numpy as np

from picirc.circuit import deserialize
from picirc.cli import run, thread_cap
from picirc.structures import tree_from_json


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_categorical(path, rows, k=3, cols=3, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.integers(0, k, size=rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"c{j}" for j in range(cols)])
        for v in base:
            noisy = [(v + rng.integers(0, 2)) % k for _ in range(cols)]
            writer.writerow(noisy)
    return path


class TestExitCodes:
    def test_unknown_subcommand_is_user_error(self, capsys):
        assert run(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag_is_user_error(self, capsys):
        assert run(["gen-gaussian", "--out", "x.csv", "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_file_is_user_error(self, tmp_path, capsys):
        assert run(["compile", "--tree", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 1
        assert "error:" in capsys.readouterr().err

    def test_out_of_range_value_is_user_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("a\n9\n")
        code = run(["clt", "--data", str(bad), "--schema", "categorical:4", "--out", str(tmp_path / "t.json")])
        assert code == 1
        assert "valid range 0..3" in capsys.readouterr().err


class TestGenGaussian:
    def test_deterministic_under_seed(self, tmp_path):
        a, b, c = (tmp_path / name for name in ("a.csv", "b.csv", "c.csv"))
        for out in (a, b):
            assert run(["gen-gaussian", "--nodes", "6", "--rows", "40", "--seed", "7", "--out", str(out)]) == 0
        assert run(["gen-gaussian", "--nodes", "6", "--rows", "40", "--seed", "8", "--out", str(c)]) == 0
        assert a.read_bytes() == b.read_bytes()
        assert a.read_bytes() != c.read_bytes()

    def test_writes_model_tree_on_request(self, tmp_path):
        out = tmp_path / "d.csv"
        tree_path = tmp_path / "tree.json"
        assert run(["gen-gaussian", "--nodes", "6", "--rows", "10", "--seed", "0",
                    "--out", str(out), "--model-out", str(tree_path)]) == 0
        tree = tree_from_json(tree_path.read_text())
        assert tree.num_latents == 3 and tree.num_observables == 3
        header, rows = read_csv(out)
        assert header == ["x0", "x1", "x2"] and len(rows) == 10


class TestSanityCheck:
    def test_row_count_is_models_times_grid(self, tmp_path):
        out = tmp_path / "mse.csv"
        code = run(["sanity-check", "--nodes", "4", "--models", "2", "--samples", "50",
                    "--n-list", "8,16", "--seed", "1", "--out", str(out)])
        assert code == 0
        header, rows = read_csv(out)
        assert header == ["model_id", "N", "mse"]
        assert len(rows) == 4
        assert all(float(r[2]) >= 0 for r in rows)


class TestPipeline:
    def test_clt_compile_materialize_eval(self, tmp_path, capsys):
        data = write_categorical(tmp_path / "d.csv", rows=60, seed=3)
        tree_path, pic_path, qpc_path = (tmp_path / n for n in ("t.json", "p.json", "q.json"))
        nets_path = tmp_path / "nets.json"

        assert run(["clt", "--data", str(data), "--schema", "categorical:3", "--out", str(tree_path)]) == 0
        assert run(["compile", "--tree", str(tree_path), "--out", str(pic_path)]) == 0
        assert run(["train", "--mode", "pic", "--data", str(data), "--valid", str(data),
                    "--schema", "categorical:3", "--tree", str(tree_path), "--n", "4", "--batch", "20",
                    "--steps", "4", "--eval-interval", "2", "--patience", "4",
                    "--seed", "0", "--out", str(nets_path)]) == 0
        assert run(["materialize", "--pic", str(pic_path), "--rule", "trapezoidal", "--n", "4",
                    "--nets", str(nets_path), "--out", str(qpc_path),
                    "--dump-sum-region", "0"]) == 0
        capsys.readouterr()

        ll_path = tmp_path / "ll.csv"
        assert run(["eval", "--model", str(qpc_path), "--data", str(data), "--out", str(ll_path)]) == 0
        printed = capsys.readouterr().out
        assert "mean_loglik" in printed and "bpd" in printed
        header, rows = read_csv(ll_path)
        assert header == ["loglik"] and len(rows) == 60

        dump_header, dump_rows = read_csv(f"{qpc_path}.sum0.csv")
        assert len(dump_header) == 4 and len(dump_rows) == 1
        row = np.array([float(v) for v in dump_rows[0]])
        assert abs(np.logaddexp.reduce(row)) < 1e-9

    def test_eval_all_marginalized_prints_zero_mass(self, tmp_path, capsys):
        data = write_categorical(tmp_path / "d.csv", rows=30, seed=5)
        tree_path, pic_path, qpc_path = (tmp_path / n for n in ("t.json", "p.json", "q.json"))
        nets_path = tmp_path / "nets.json"
        run(["clt", "--data", str(data), "--schema", "categorical:3", "--out", str(tree_path)])
        run(["compile", "--tree", str(tree_path), "--out", str(pic_path)])
        run(["train", "--mode", "pic", "--data", str(data), "--valid", str(data),
             "--schema", "categorical:3", "--tree", str(tree_path), "--n", "4", "--batch", "30",
             "--steps", "2", "--eval-interval", "2", "--patience", "2", "--seed", "0", "--out", str(nets_path)])
        run(["materialize", "--pic", str(pic_path), "--n", "4", "--nets", str(nets_path), "--out", str(qpc_path)])
        blank = tmp_path / "blank.csv"
        blank.write_text("c0,c1,c2\n,,\n")
        capsys.readouterr()
        assert run(["eval", "--model", str(qpc_path), "--data", str(blank)]) == 0
        assert "mean_loglik 0.0" in capsys.readouterr().out

    def test_gaussian_pipeline_needs_no_nets(self, tmp_path, capsys):
        data, tree_path = tmp_path / "g.csv", tmp_path / "t.json"
        pic_path, qpc_path = tmp_path / "p.json", tmp_path / "q.json"
        run(["gen-gaussian", "--nodes", "4", "--rows", "50", "--seed", "2",
             "--out", str(data), "--model-out", str(tree_path)])
        assert run(["compile", "--tree", str(tree_path), "--out", str(pic_path)]) == 0
        assert run(["materialize", "--pic", str(pic_path), "--n", "16", "--out", str(qpc_path)]) == 0
        qpc = deserialize(qpc_path.read_text())
        assert not qpc.is_symbolic
        capsys.readouterr()
        assert run(["eval", "--model", str(qpc_path), "--data", str(data)]) == 0
        assert "bpd" in capsys.readouterr().out

    def test_materialize_neural_without_nets_fails(self, tmp_path, capsys):
        data = write_categorical(tmp_path / "d.csv", rows=30, seed=1)
        tree_path, pic_path = tmp_path / "t.json", tmp_path / "p.json"
        run(["clt", "--data", str(data), "--schema", "categorical:3", "--out", str(tree_path)])
        run(["compile", "--tree", str(tree_path), "--out", str(pic_path)])
        code = run(["materialize", "--pic", str(pic_path), "--n", "4", "--out", str(tmp_path / "q.json")])
        assert code == 1
        assert "--nets" in capsys.readouterr().err


class TestTrain:
    def test_progress_csv_has_schedule_columns(self, tmp_path):
        data = write_categorical(tmp_path / "d.csv", rows=40, seed=4)
        out = tmp_path / "nets.json"
        progress = tmp_path / "prog.csv"
        assert run(["train", "--mode", "pic", "--data", str(data), "--valid", str(data),
                    "--schema", "categorical:3", "--n", "4", "--batch", "20", "--steps", "4",
                    "--eval-interval", "2", "--patience", "4", "--seed", "0",
                    "--out", str(out), "--progress", str(progress)]) == 0
        header, rows = read_csv(progress)
        assert header == ["step", "lr", "train_nll", "valid_bpd"]
        assert [r[0] for r in rows] == ["0", "2", "4"]
        assert float(rows[0][1]) == 0.01

    def test_em_mode_writes_a_concrete_circuit(self, tmp_path):
        data = write_categorical(tmp_path / "d.csv", rows=40, seed=6)
        out = tmp_path / "em.json"
        assert run(["train", "--mode", "hclt-em", "--data", str(data), "--valid", str(data),
                    "--schema", "categorical:3", "--n", "3", "--batch", "40", "--steps", "6",
                    "--eval-interval", "3", "--patience", "6", "--seed", "0", "--out", str(out)]) == 0
        pc = deserialize(out.read_text())
        assert not pc.is_symbolic
        assert any(u.kind == "sum" for u in pc.units)

    def test_adam_mode_runs(self, tmp_path):
        data = write_categorical(tmp_path / "d.csv", rows=40, seed=6)
        out = tmp_path / "ha.json"
        assert run(["train", "--mode", "hclt-adam", "--data", str(data), "--valid", str(data),
                    "--schema", "categorical:3", "--n", "3", "--batch", "20", "--steps", "6",
                    "--eval-interval", "3", "--patience", "6", "--seed", "0", "--out", str(out)]) == 0
        assert deserialize(out.read_text()).num_vars == 3

    def test_deterministic_checkpoints_under_seed(self, tmp_path):
        data = write_categorical(tmp_path / "d.csv", rows=30, seed=2)
        outs = []
        for name in ("a.json", "b.json"):
            out = tmp_path / name
            assert run(["train", "--mode", "pic", "--data", str(data), "--valid", str(data),
                        "--schema", "categorical:3", "--n", "4", "--batch", "15", "--steps", "4",
                        "--eval-interval", "2", "--patience", "4", "--seed", "3",
                        "--out", str(out), "--progress", str(tmp_path / (name + ".prog"))]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_mismatched_schemas_rejected(self, tmp_path, capsys):
        data = write_categorical(tmp_path / "d.csv", rows=20, seed=0)
        other = tmp_path / "v.csv"
        other.write_text("c0\n1\n")
        code = run(["train", "--mode", "pic", "--data", str(data), "--valid", str(other),
                    "--schema", "categorical:3", "--out", str(tmp_path / "o.json")])
        assert code == 1
        assert "schema" in capsys.readouterr().err


class TestBench:
    def test_writes_one_row_per_iteration(self, tmp_path):
        data, tree_path = tmp_path / "g.csv", tmp_path / "t.json"
        pic_path, qpc_path = tmp_path / "p.json", tmp_path / "q.json"
        run(["gen-gaussian", "--nodes", "4", "--rows", "10", "--seed", "0",
             "--out", str(data), "--model-out", str(tree_path)])
        run(["compile", "--tree", str(tree_path), "--out", str(pic_path)])
        run(["materialize", "--pic", str(pic_path), "--n", "8", "--out", str(qpc_path)])
        out = tmp_path / "bench.csv"
        assert run(["bench", "--model", str(qpc_path), "--batch", "16", "--iters", "5",
                    "--seed", "0", "--out", str(out)]) == 0
        header, rows = read_csv(out)
        assert header == ["iter", "seconds"] and len(rows) == 5


class TestThreads:
    def test_flag_wins_over_environment(self, monkeypatch):
        monkeypatch.setenv("PICIRC_THREADS", "3")

        class Args:
            threads = 5

        assert thread_cap(Args()) == 5

    def test_environment_fallback(self, monkeypatch):
        monkeypatch.setenv("PICIRC_THREADS", "3")

        class Args:
            threads = None

        assert thread_cap(Args()) == 3
        monkeypatch.delenv("PICIRC_THREADS")
        assert thread_cap(Args()) == 1

    def test_sanity_check_parallel_rows_match_serial(self, tmp_path, monkeypatch):
        serial, parallel = tmp_path / "s.csv", tmp_path / "p.csv"
        args = ["sanity-check", "--nodes", "4", "--models", "2", "--samples", "30",
                "--n-list", "8", "--seed", "2"]
        assert run([*args, "--out", str(serial)]) == 0
        monkeypatch.setenv("PICIRC_THREADS", "2")
        assert run([*args, "--out", str(parallel)]) == 0
        assert serial.read_bytes() == parallel.read_bytes()
