import csv
import json
import socket

import pytest

from decomptime import covert
from decomptime.cli import EXIT_CONTRACT, EXIT_OK, EXIT_TRANSPORT, EXIT_USAGE, load_layouts, run
from decomptime.layout import LayoutConfig


@pytest.fixture
def layout_file(tmp_path):
    path = tmp_path / "layout.json"
    path.write_text(LayoutConfig(seed=1, total_size=2048, secret_offset=0, guess_offset=600,
                                 entropy_modulus=2, compression_level=1).to_json())
    return str(path)


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_usage_errors(tmp_path, capsys):
    assert run(["nope"]) == EXIT_USAGE
    assert run(["attack-dict", "--out", str(tmp_path)]) == EXIT_USAGE  # --layout missing
    assert "usage" in capsys.readouterr().err


def test_characterize_writes_csv_and_manifest(tmp_path):
    out = tmp_path / "c"
    assert run(["characterize", "--iters", "20", "--warmup", "2", "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader((out / "characterize.csv").open()))
    assert {r["entropy_kind"] for r in rows} == {"fully", "partially", "incompressible"}
    m = manifest(out)
    assert m["subcommand"] == "characterize" and "core_pinned" in m["machine"]
    assert m["config"]["exit_code"] == 0


def test_local_dictionary_attack(tmp_path, layout_file, capsys):
    out = tmp_path / "d"
    code = run(["attack-dict", "--local", "--secret", "ZQ81XK", "--n-guesses", "4", "--layout", layout_file,
                "--reps-min", "5", "--reps-max", "10", "--out", str(out)])
    assert code == EXIT_OK
    assert (out / "transcript.json").exists() and (out / "transcript.csv").exists()
    assert manifest(out)["config"]["secret"] == "<redacted>"
    assert "ZQ81XK" not in (out / "manifest.json").read_text()


def test_unreachable_target_is_transport_error(tmp_path, layout_file):
    s = socket.create_server(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    code = run(["attack-dict", "--target", f"127.0.0.1:{port}", "--guesses-file", layout_file, "--layout",
                layout_file, "--out", str(tmp_path)])
    assert code == EXIT_TRANSPORT
    assert manifest(tmp_path)["config"]["exit_code"] == EXIT_TRANSPORT


def test_bad_layout_is_contract_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"total_size": 10}))
    code = run(["attack-dict", "--local", "--secret", "ABCDEF", "--layout", str(bad), "--out", str(tmp_path)])
    assert code == EXIT_CONTRACT


def test_short_prefix_is_contract_error(tmp_path, layout_file):
    code = run(["attack-bytewise", "--local", "--secret", "AB", "--prefix", "ab", "--len", "2",
                "--layout", layout_file, "--out", str(tmp_path)])
    assert code == EXIT_CONTRACT


def test_load_layouts_accepts_best_json_and_lists(tmp_path):
    cfg = LayoutConfig(seed=4, total_size=3000)
    (tmp_path / "best.json").write_text(json.dumps({"config": cfg.to_dict(), "fitness_ns": 1.0}))
    (tmp_path / "list.json").write_text(json.dumps([cfg.to_dict(), cfg.to_dict()]))
    assert load_layouts(str(tmp_path / "best.json")) == [cfg]
    assert load_layouts(str(tmp_path / "list.json")) == [cfg, cfg]


def test_covert_round_trip_over_page_store(tmp_path):
    sock = str(tmp_path / "p.sock")
    srv = covert.PageStoreServer(sock, covert.PageStore()).start()
    try:
        assert run(["covert-send", "--pagestore", sock, "--random", "24", "--seed", "3",
                    "--out", str(tmp_path / "s")]) == EXIT_OK
        assert run(["covert-recv", "--pagestore", sock, "--n-bits", "24", "--expect-random", "24", "--seed", "3",
                    "--calibrate", "8", "--reps", "20", "--out", str(tmp_path / "r")]) == EXIT_OK
    finally:
        srv.stop()
    row = next(csv.DictReader((tmp_path / "r" / "recv.csv").open()))
    assert int(row["bits_sent"]) == 24 and int(row["errors"]) <= 1
    assert len((tmp_path / "r" / "received.txt").read_text().strip()) == 24


def test_bundled_layout_by_name(tmp_path):
    from decomptime.layout import bundled_layouts
    assert "kv-dict" in bundled_layouts()
    assert load_layouts("kv-dict")[0].compression_level == 6
    assert run(["attack-dict", "--local", "--secret", "ABCDEF", "--layout", "no-such-layout",
                "--out", str(tmp_path)]) == EXIT_CONTRACT


def test_local_bytewise_with_edge_search(tmp_path):
    out = tmp_path / "b"
    code = run(["attack-bytewise", "--local", "--secret", "Q4Z8LM", "--prefix", "cookie=", "--len", "6",
                "--layout", "kv-bytewise", "--codec", "deflate", "--policy", "memcached", "--edge-search", "16",
                "--polarity", "CORRECT_SLOWEST", "--reps-min", "5", "--reps-max", "30", "--top-k", "4",
                "--out", str(out)])
    assert code == EXIT_OK
    doc = json.loads((out / "transcript.json").read_text())
    assert len(doc["edges"]) == 6 and doc["recovered"] == "Q4Z8LM"
