import csv

import pytest

from fatrec.cli import main
from fatrec.data import build_item_user_index, prepare, read_cache
from fatrec.inbe import extract_all

from .conftest import write_synthetic_categories, write_synthetic_log

TINY = ["--d", "6", "--T", "2", "--epochs", "1", "--batch-size", "64", "--max-seq-len", "8",
        "--routing-iters", "2", "--deterministic"]


@pytest.fixture(scope="module")
def synth_paths(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli_log")
    return (write_synthetic_log(d / "log.tsv", n_users=50, n_items=150, per_user=(12, 40), seed=1),
            write_synthetic_categories(d / "cats.tsv", n_items=150))


@pytest.fixture(scope="module")
def synth_split(synth_paths):
    return prepare(synth_paths[0], "tsv", 5, 2, categories=synth_paths[1])


@pytest.fixture(scope="module")
def cache(synth_paths, tmp_path_factory):
    log_path, cat_path = synth_paths
    out = tmp_path_factory.mktemp("cli") / "synth.fatd"
    assert main(["prepare", "--input", str(log_path), "--categories", str(cat_path),
                 "--min-user", "5", "--min-item", "2", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(cache, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    for v in ("fat", "base"):
        assert main(["train", "--cache", str(cache), "--out", str(root / v), "--variant", v, *TINY]) == 0
    return root


def test_prepare_refuses_overwrite(cache, synth_paths, capsys):
    before = cache.read_bytes()
    rc = main(["prepare", "--input", str(synth_paths[0]), "--min-user", "5", "--min-item", "2",
               "--out", str(cache)])
    assert rc == 2 and "--force" in capsys.readouterr().err
    assert cache.read_bytes() == before


def test_prepare_round_trip_and_summary(cache, synth_split, capsys):
    back = read_cache(cache)
    assert back.fingerprint() == synth_split.fingerprint()
    assert back.catalog.user_ids == synth_split.catalog.user_ids


def test_prepare_force_and_bad_input(cache, synth_paths, tmp_path, capsys):
    rc = main(["prepare", "--input", str(synth_paths[0]), "--min-user", "5", "--min-item", "2",
               "--out", str(tmp_path / "x.fatd"), "--force"])
    out = capsys.readouterr().out
    assert rc == 0 and "users\t" in out and "interactions\t" in out
    bad = tmp_path / "bad.tsv"
    bad.write_text("u1\ti1\tnot-a-number\tx\n")
    assert main(["prepare", "--input", str(bad), "--out", str(tmp_path / "y.fatd")]) == 1


def test_train_phase_logs(trained):
    fat = (trained / "fat" / "run.log").read_text()
    base = (trained / "base" / "run.log").read_text()
    assert "\nneighbors\t" in fat
    assert "neighbors" not in base
    for v in ("fat", "base"):
        lines = (trained / v / "train.log").read_text().splitlines()
        assert len(lines) == 1 and lines[0].startswith("1\t")
        assert (trained / v / "checkpoint.fatm").exists()


def test_train_rerun_bit_identical(cache, trained, tmp_path):
    assert main(["train", "--cache", str(cache), "--out", str(tmp_path), *TINY]) == 0
    for name in ("checkpoint.fatm", "train.log", "run.log"):
        assert (tmp_path / name).read_bytes() == (trained / "fat" / name).read_bytes()


def test_train_default_headline_config():
    from fatrec.cli import build_parser
    args = build_parser().parse_args(["train", "--cache", "c"])
    assert (args.T, args.K, args.variant) == (6, 1, "fat")


def test_evaluate_rows_and_rerun(cache, trained, tmp_path, capsys):
    argv = ["evaluate", "--checkpoint", str(trained / "fat" / "checkpoint.fatm"),
            "--cache", str(cache), "--N", "20,50", "--deterministic"]
    assert main(argv + ["--out", str(tmp_path / "a")]) == 0
    assert main(argv + ["--out", str(tmp_path / "b")]) == 0
    rows = list(csv.reader(open(tmp_path / "a" / "report.csv", encoding="utf-8")))
    metrics = [(r[0], r[1]) for r in rows[1:]]
    assert sorted(metrics) == sorted((m, n) for m in ("recall", "ndcg", "diversity") for n in ("20", "50"))
    for f in ("report.csv", "report_per_user.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert "recall@50\t" in capsys.readouterr().out


def test_evaluate_base_and_fat_comparable(cache, trained, tmp_path):
    for v in ("fat", "base"):
        assert main(["evaluate", "--checkpoint", str(trained / v / "checkpoint.fatm"), "--cache",
                     str(cache), "--out", str(tmp_path), "--name", v]) == 0
    fat = list(csv.reader(open(tmp_path / "fat.csv")))
    base = list(csv.reader(open(tmp_path / "base.csv")))
    assert [r[:2] for r in fat] == [r[:2] for r in base]


def test_evaluate_diversity_without_categories(synth_paths, trained, tmp_path, capsys):
    bare = tmp_path / "bare.fatd"
    assert main(["prepare", "--input", str(synth_paths[0]), "--min-user", "5", "--min-item", "2",
                 "--out", str(bare)]) == 0
    rc = main(["evaluate", "--checkpoint", str(trained / "fat" / "checkpoint.fatm"),
               "--cache", str(bare), "--out", str(tmp_path), "--diversity", "1"])
    assert rc == 1 and "categor" in capsys.readouterr().err


def test_evaluate_mismatch_names_fields(trained, tmp_path, capsys):
    other = tmp_path / "other.tsv"
    other.write_text("".join(f"u{u}\ti{i}\t5\t{u * 100 + i}\n" for u in range(12) for i in range(10)))
    assert main(["prepare", "--input", str(other), "--min-user", "3", "--min-item", "1",
                 "--out", str(tmp_path / "o.fatd")]) == 0
    rc = main(["evaluate", "--checkpoint", str(trained / "fat" / "checkpoint.fatm"),
               "--cache", str(tmp_path / "o.fatd"), "--out", str(tmp_path)])
    err = capsys.readouterr().err
    assert rc == 1 and "n_items" in err and "n_users" in err


def test_config_file_precedence(cache, tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# tiny run\nvariant = base\nd=6\nT=2\nepochs=1\nbatch-size=64\nmax_seq_len=8\n"
                    "seed=3\n")
    from fatrec.cli import parse_args
    args = parse_args(["train", "--cache", str(cache), "--config", str(conf), "--seed", "5"])
    assert (args.variant, args.d, args.batch_size, args.seed) == ("base", 6, 64, 5)


def test_config_unknown_key_is_usage_error(cache, tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("nonsense=1\n")
    with pytest.raises(SystemExit) as e:
        main(["train", "--cache", str(cache), "--config", str(conf)])
    assert e.value.code == 2


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["train", "--cache", "x", "--no-such-flag", "1"])
    assert e.value.code == 2


def test_every_flag_documents_default(capsys):
    from fatrec.cli import build_parser
    sub = build_parser()._subparsers._group_actions[0].choices
    for name, p in sub.items():
        for a in p._actions:
            if a.option_strings and a.dest != "help" and not a.required:
                assert a.help, (name, a.dest)
        text = p.format_help()
        assert text.count("(default:") == sum(
            1 for a in p._actions if a.option_strings and a.dest != "help" and a.help), name


def test_sweep_single_value_matches_train_evaluate(cache, trained, tmp_path):
    rc = main(["sweep", "--cache", str(cache), "--parameter", "T", "--values", "2",
               "--out", str(tmp_path), *TINY])
    assert rc == 0
    assert (tmp_path / "T=2" / "checkpoint.fatm").read_bytes() == \
        (trained / "fat" / "checkpoint.fatm").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "sweep_T.csv")))
    assert len(rows) == 1 and rows[0]["status"] == "ok"
    main(["evaluate", "--checkpoint", str(trained / "fat" / "checkpoint.fatm"), "--cache",
          str(cache), "--out", str(tmp_path), "--name", "ref"])
    ref = {f"{r[0]}@{r[1]}": float(r[2]) for r in list(csv.reader(open(tmp_path / "ref.csv")))[1:]}
    for k, v in ref.items():
        assert float(rows[0][k]) == v


def test_sweep_records_failures_and_continues(cache, tmp_path):
    rc = main(["sweep", "--cache", str(cache), "--parameter", "K", "--values", "1,0,2",
               "--out", str(tmp_path), *TINY])
    assert rc == 1
    rows = list(csv.DictReader(open(tmp_path / "sweep_K.csv")))
    assert [r["K"] for r in rows] == ["1", "0", "2"]
    assert [r["status"] for r in rows] == ["ok", "failed", "ok"]
    assert rows[1]["error"] and rows[1]["recall@50"] == ""
    assert list(rows[0]) == ["K", "recall@20", "ndcg@20", "diversity@20", "recall@50", "ndcg@50",
                             "diversity@50", "status", "error"]


def test_export_coupling(cache, trained, synth_split, tmp_path, capsys):
    sets = extract_all(synth_split, build_item_user_index(synth_split), K=1)
    u = next(k for k, s in enumerate(sets) if s.sequences)
    ext = synth_split.catalog.user_ids[u]
    out = tmp_path / "c.csv"
    assert main(["export-coupling", "--checkpoint", str(trained / "fat" / "checkpoint.fatm"),
                 "--cache", str(cache), "--user", ext, "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert rows and {r["trend_index"] for r in rows} == {"0", "1"}
    assert main(["export-coupling", "--checkpoint", str(trained / "fat" / "checkpoint.fatm"),
                 "--cache", str(cache), "--user", "nobody", "--out", str(out)]) == 1
    assert main(["export-coupling", "--checkpoint", str(trained / "base" / "checkpoint.fatm"),
                 "--cache", str(cache), "--user", ext, "--out", str(out)]) == 1


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    suites = {line.split("\t")[0] for line in out.splitlines()}
    assert {"numerics", "seqmodel", "trends", "fusion", "max_relative_error"} <= suites
