import json

import numpy as np
import pytest

from cdlp.cli import main, read_tensor_file, write_tensor_file
from cdlp.config import canonical_config_text, load_canonical_model
from cdlp.model import Tensor
from cdlp.weights import serialize_weights

from support import random_tensor, random_weight_store

KEY_HEX = "00112233445566778899aabbccddeeff"
CAP = 7 * 2**20


@pytest.fixture()
def workspace(tmp_path):
    model = load_canonical_model()
    rng = np.random.default_rng(23)
    cfg = tmp_path / "model.cfg"
    cfg.write_text(canonical_config_text())
    weights = tmp_path / "model.weights"
    weights.write_bytes(serialize_weights(random_weight_store(model, rng)))
    tensor = tmp_path / "input.tensor"
    write_tensor_file(tensor, random_tensor(rng, model.input_dims))
    return tmp_path, cfg, weights, tensor


def run_cli(*argv, capsys=None):
    code = main([str(a) for a in argv])
    return code


def plan_and_encrypt(workspace, scheme="layered", cap=CAP):
    tmp, cfg, weights, tensor = workspace
    manifest = tmp / "plan.manifest"
    parts = tmp / "parts"
    assert run_cli("plan", "--cfg", cfg, "--scheme", scheme, "--cap", cap, "--out", manifest) == 0
    assert run_cli(
        "encrypt", "--cfg", cfg, "--weights", weights, "--plan", manifest,
        "--key", KEY_HEX, "--out", parts,
    ) == 0
    return manifest, parts


def test_plan_report_lists_eleven_partitions(workspace, capsys):
    tmp, cfg, _, _ = workspace
    assert run_cli("plan", "--cfg", cfg, "--scheme", "layered", "--cap", CAP, "--json") == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["scheme"] == "layered"
    assert len(payload["partitions"]) == 11
    assert all(p["footprint_bytes"] <= CAP for p in payload["partitions"])


def test_plan_shows_subset_choice_and_spill(workspace, capsys):
    tmp, cfg, _, _ = workspace
    assert run_cli("plan", "--cfg", cfg, "--scheme", "sublayer", "--cap", 100_000, "--json") == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["sublayer"]["4"]["subset_count"] == 2
    assert payload["spill_layers"] == []


def test_plan_infeasible_cap_exits_3(workspace, capsys):
    tmp, cfg, _, _ = workspace
    assert run_cli("plan", "--cfg", cfg, "--scheme", "layered", "--cap", 1000) == 3
    err = capsys.readouterr().err
    assert "layer" in err


def test_plan_reports_spill_flags(tmp_path, capsys):
    cfg = tmp_path / "wide.cfg"
    cfg.write_text(
        "[net]\nchannels=4\nheight=1\nwidth=1\n"
        "[connected]\noutputs=20000\nactivation=relu\n"
        "[connected]\noutputs=8\nactivation=linear\n"
    )
    assert run_cli("plan", "--cfg", cfg, "--scheme", "sublayer", "--cap", 100_000, "--json") == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["spill_layers"] == [1]
    assert payload["sublayer"]["0"]["subset_count"] > 1
    assert all(p["footprint_bytes"] <= 100_000 for p in payload["partitions"])


def test_plan_explicit_subset_size(workspace, capsys):
    tmp, cfg, _, _ = workspace
    assert run_cli("plan", "--cfg", cfg, "--scheme", "sublayer", "--cap", CAP,
                   "--s", 5, "--json") == 0
    payload = json.loads(capsys.readouterr().out)
    assert all(entry["subset_size"] == 5 for entry in payload["sublayer"].values())
    # s must be valid for every parameterized layer (smallest has 6 units)
    assert run_cli("plan", "--cfg", cfg, "--scheme", "sublayer", "--cap", CAP, "--s", 500) == 3


def test_encrypt_writes_eleven_containers(workspace):
    manifest, parts = plan_and_encrypt(workspace)
    files = sorted(p.name for p in parts.iterdir())
    assert len([f for f in files if f.endswith(".cdlp")]) == 11
    assert "plan.manifest" in files


def test_encrypt_bad_key_length_exits_2_without_files(workspace, tmp_path):
    tmp, cfg, weights, _ = workspace
    manifest = tmp / "plan.manifest"
    run_cli("plan", "--cfg", cfg, "--scheme", "layered", "--cap", CAP, "--out", manifest)
    out = tmp_path / "nothing"
    assert run_cli(
        "encrypt", "--cfg", cfg, "--weights", weights, "--plan", manifest,
        "--key", "abcd", "--out", out,
    ) == 2
    assert not out.exists()


def test_encrypt_missing_weights_exits_2(workspace):
    tmp, cfg, _, _ = workspace
    manifest = tmp / "plan.manifest"
    run_cli("plan", "--cfg", cfg, "--scheme", "layered", "--cap", CAP, "--out", manifest)
    assert run_cli(
        "encrypt", "--cfg", cfg, "--weights", tmp / "missing.weights", "--plan", manifest,
        "--key", KEY_HEX, "--out", tmp / "parts",
    ) == 2


def test_reencrypting_changes_ciphertext_not_plaintext(workspace):
    tmp, cfg, weights, tensor = workspace
    manifest, parts = plan_and_encrypt(workspace)
    first = (parts / "part_0.cdlp").read_bytes()
    assert run_cli(
        "encrypt", "--cfg", cfg, "--weights", weights, "--plan", manifest,
        "--key", KEY_HEX, "--out", parts,
    ) == 0
    second = (parts / "part_0.cdlp").read_bytes()
    assert first != second  # fresh nonce
    assert run_cli(
        "run", "--cfg", cfg, "--parts", parts, "--plan", manifest, "--key", KEY_HEX,
        "--input", tensor, "--cap", CAP, "--oracle",
    ) == 0


def test_run_with_oracle_reports_equivalence(workspace, capsys):
    tmp, cfg, _, tensor = workspace
    manifest, parts = plan_and_encrypt(workspace)
    capsys.readouterr()
    assert run_cli(
        "run", "--cfg", cfg, "--parts", parts, "--plan", manifest, "--key", KEY_HEX,
        "--input", tensor, "--cap", CAP, "--oracle", "--json",
    ) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["equivalent"] is True
    assert payload["context_switches"] == 22
    assert payload["partitions"] == 11


def test_run_overhead_ratio_from_supplied_baseline(workspace, capsys):
    tmp, cfg, _, tensor = workspace
    manifest, parts = plan_and_encrypt(workspace)
    capsys.readouterr()
    assert run_cli(
        "run", "--cfg", cfg, "--parts", parts, "--plan", manifest, "--key", KEY_HEX,
        "--input", tensor, "--cap", CAP, "--baseline", "0.00823", "--json",
    ) == 0
    payload = json.loads(capsys.readouterr().out)
    expected = (0.00823 + payload["overhead_seconds"]) / 0.00823
    assert payload["overhead_ratio"] == pytest.approx(expected, rel=1e-12)


def test_run_corrupted_partition_exits_4(workspace, capsys):
    tmp, cfg, _, tensor = workspace
    manifest, parts = plan_and_encrypt(workspace)
    victim = parts / "part_3.cdlp"
    data = bytearray(victim.read_bytes())
    data[45] ^= 1
    victim.write_bytes(bytes(data))
    assert run_cli(
        "run", "--cfg", cfg, "--parts", parts, "--plan", manifest, "--key", KEY_HEX,
        "--input", tensor, "--cap", CAP,
    ) == 4
    assert "IntegrityError" in capsys.readouterr().err


def test_run_branched_model(tmp_path, capsys):
    cfg = tmp_path / "branched.cfg"
    cfg.write_text(
        "[net]\nchannels=1\nheight=4\nwidth=4\n"
        "[connected]\noutputs=8\nactivation=relu\n"
        "[branch]\nbranches=2\n"
        "[connected]\noutputs=6\nactivation=linear\n"
    )
    from cdlp.config import parse_config

    model = parse_config(cfg.read_text())
    rng = np.random.default_rng(3)
    weights = tmp_path / "w.bin"
    weights.write_bytes(serialize_weights(random_weight_store(model, rng)))
    tensor = tmp_path / "x.bin"
    write_tensor_file(tensor, random_tensor(rng, (1, 4, 4)))
    manifest = tmp_path / "plan.manifest"
    parts = tmp_path / "parts"
    assert run_cli("plan", "--cfg", cfg, "--scheme", "branched", "--cap", CAP, "--out", manifest) == 0
    assert run_cli("encrypt", "--cfg", cfg, "--weights", weights, "--plan", manifest,
                   "--key", KEY_HEX, "--out", parts) == 0
    assert (parts / "part_0.blob").exists()  # normal-world prefix stays plaintext
    capsys.readouterr()
    assert run_cli("run", "--cfg", cfg, "--parts", parts, "--plan", manifest, "--key", KEY_HEX,
                   "--input", tensor, "--cap", CAP, "--oracle", "--json") == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["equivalent"] is True
    assert payload["context_switches"] == 4  # two branches of one branched layer


def test_estimate_canonical_case(capsys):
    assert run_cli("estimate", "--layers", 11, "--bytes", 191790) == 0
    text = capsys.readouterr().out
    seconds = float(text.split()[-1])
    assert seconds == pytest.approx(0.03305, abs=1e-5)


def test_estimate_zero_case(capsys):
    assert run_cli("estimate", "--layers", 0, "--bytes", 0, "--json") == 0
    assert json.loads(capsys.readouterr().out)["overhead_seconds"] == 0.0


def test_estimate_custom_constants_scale_linearly(capsys):
    assert run_cli("estimate", "--layers", 0, "--bytes", 1000, "--json") == 0
    base = json.loads(capsys.readouterr().out)["overhead_seconds"]
    assert run_cli("estimate", "--layers", 0, "--bytes", 1000,
                   "--td", 163.7e-9 / 2, "--json") == 0
    halved = json.loads(capsys.readouterr().out)["overhead_seconds"]
    assert halved == pytest.approx(base / 2, rel=1e-12)


def test_estimate_negative_layers_is_usage_error(capsys):
    assert run_cli("estimate", "--layers", -1, "--bytes", 0) == 2


def test_json_and_text_render_the_same_numbers(workspace, capsys):
    tmp, cfg, _, tensor = workspace
    manifest, parts = plan_and_encrypt(workspace)
    args = ["run", "--cfg", cfg, "--parts", parts, "--plan", manifest, "--key", KEY_HEX,
            "--input", tensor, "--cap", CAP, "--baseline", "0.00823"]
    capsys.readouterr()
    assert run_cli(*args, "--json") == 0
    payload = json.loads(capsys.readouterr().out)
    assert run_cli(*args) == 0
    text = capsys.readouterr().out
    lines = dict(line.split(": ", 1) for line in text.strip().splitlines())
    assert int(lines["context switches"]) == payload["context_switches"]
    assert int(lines["decrypted bytes"]) == payload["decrypted_bytes"]
    assert float(lines["estimated overhead seconds"]) == payload["overhead_seconds"]
    assert float(lines["overhead ratio"]) == payload["overhead_ratio"]

    assert run_cli("estimate", "--layers", 11, "--bytes", 191790, "--json") == 0
    est = json.loads(capsys.readouterr().out)
    assert run_cli("estimate", "--layers", 11, "--bytes", 191790) == 0
    est_text = capsys.readouterr().out
    assert float(est_text.split()[-1]) == est["overhead_seconds"]


def test_tensor_file_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    t = random_tensor(rng, (2, 3, 4))
    path = tmp_path / "t.bin"
    write_tensor_file(path, t)
    back = read_tensor_file(path)
    assert back.dims == (2, 3, 4)
    assert back.data.tobytes() == t.data.tobytes()
    assert path.stat().st_size == 12 + 4 * 24


def test_tensor_file_flat_vector(tmp_path):
    path = tmp_path / "t.bin"
    write_tensor_file(path, Tensor((5,), [1, 2, 3, 4, 5]))
    assert read_tensor_file(path).dims == (5, 1, 1)


def test_truncated_tensor_file(tmp_path, workspace):
    path = tmp_path / "t.bin"
    write_tensor_file(path, Tensor((5,), [1, 2, 3, 4, 5]))
    path.write_bytes(path.read_bytes()[:-2])
    manifest, parts = plan_and_encrypt(workspace)
    tmp, cfg, _, _ = workspace
    assert run_cli(
        "run", "--cfg", cfg, "--parts", parts, "--plan", manifest, "--key", KEY_HEX,
        "--input", path, "--cap", CAP,
    ) == 4
