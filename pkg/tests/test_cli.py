import os
import random

import pytest

from p3log import cli, crypto, keystore, ledger, protocol

SMALL_CONF = """
[sim]
seed = 77
duration = 1500

[node alice]
key_bits = 2048
n_min = 1
n_max = 2
difficulty = 2
slow_iterations = 2
datum_count = 2
datum_size = 40

[node bob]
key_bits = 2048
n_min = 1
n_max = 2
difficulty = 2
slow_iterations = 2
datum_count = 2
datum_size = 40

[node carol]
key_bits = 2048
n_min = 1
n_max = 2
difficulty = 2
slow_iterations = 2
datum_count = 2
datum_size = 40
"""

SMALL_SCENARIO = """
at 10  alice request bob 0 first usage
at 300 carol request alice 1 second usage
at 560 bob   request carol 0 third usage
at 1100 alice erase #0
"""


@pytest.fixture(scope="module")
def sim_out(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    conf = base / "small.conf"
    scen = base / "small.scenario"
    conf.write_text(SMALL_CONF)
    scen.write_text(SMALL_SCENARIO)
    out = base / "out"
    code = cli.main(["simulate", str(scen), "--config", str(conf), "--out", str(out)])
    assert code == 0
    return base


def test_simulate_writes_expected_files(sim_out):
    out = sim_out / "out"
    for name in ("alice", "bob", "carol"):
        assert (out / f"{name}.chain").exists()
        assert (out / f"{name}.store").exists()
    assert (out / "trace.txt").exists()
    assert (out / "attacks.json").exists()


def test_simulate_rejects_malformed_scenario(sim_out, capsys):
    bad = sim_out / "bad.scenario"
    bad.write_text("at 10 alice request bob 0\nat bogus alice crash\n")
    code = cli.main(["simulate", str(bad), "--config", str(sim_out / "small.conf"), "--out", str(sim_out / "nope")])
    assert code == 2
    assert "line 2" in capsys.readouterr().err


def test_simulate_unknown_node_is_parse_error(sim_out, capsys):
    bad = sim_out / "unknown.scenario"
    bad.write_text("at 10 nobody request bob 0\n")
    code = cli.main(["simulate", str(bad), "--config", str(sim_out / "small.conf"), "--out", str(sim_out / "nope2")])
    assert code == 3 or code == 2  # surfaces before/at run start
    assert "nobody" in capsys.readouterr().err


def test_simulate_deterministic_outputs(sim_out):
    out2 = sim_out / "out2"
    code = cli.main([
        "simulate", str(sim_out / "small.scenario"), "--config", str(sim_out / "small.conf"), "--out", str(out2),
    ])
    assert code == 0
    for fname in ("alice.chain", "alice.store", "bob.chain", "trace.txt", "attacks.json"):
        a = (sim_out / "out" / fname).read_bytes()
        b = (out2 / fname).read_bytes()
        assert a == b, f"{fname} differs between identical runs"


def test_query_lists_decrypted_entries(sim_out, capsys):
    out = sim_out / "out"
    code = cli.main(["query", "--chain", str(out / "bob.chain"), "--store", str(out / "bob.store")])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2  # bob: owner of one usage, consumer of another
    assert any("third usage" in line for line in lines)
    # alice erased her link to the first usage, which dropped bob's key too
    assert any("<no-key>" in line for line in lines)


def test_query_porcelain_fixed_columns(sim_out, capsys):
    out = sim_out / "out"
    code = cli.main(["--porcelain", "query", "--chain", str(out / "bob.chain"), "--store", str(out / "bob.store")])
    assert code == 0
    for line in capsys.readouterr().out.strip().splitlines():
        assert len(line.split("\t")) == 7


def test_query_empty_store_ok(tmp_path, sim_out, capsys):
    store = keystore.KeyStore(keystore.MasterKey(seed=crypto.digest(b"empty")), key_bits=2048)
    path = tmp_path / "empty.store"
    store.save(str(path))
    code = cli.main(["query", "--chain", str(sim_out / "out" / "alice.chain"), "--store", str(path)])
    assert code == 0
    assert capsys.readouterr().out.strip() == ""


def test_query_tampered_chain_fails(tmp_path, sim_out, capsys):
    raw = bytearray((sim_out / "out" / "alice.chain").read_bytes())
    raw[60] ^= 0xFF
    bad = tmp_path / "bad.chain"
    bad.write_bytes(bytes(raw))
    code = cli.main(["query", "--chain", str(bad), "--store", str(sim_out / "out" / "alice.store")])
    assert code == 3


def test_query_garbage_store_exit_4(tmp_path, sim_out):
    path = tmp_path / "garbage.store"
    path.write_bytes(b"not a store at all")
    code = cli.main(["query", "--chain", str(sim_out / "out" / "alice.chain"), "--store", str(path)])
    assert code == 4


def test_validate_chain_command(sim_out, capsys, tmp_path):
    chain_path = sim_out / "out" / "alice.chain"
    assert cli.main(["validate-chain", str(chain_path)]) == 0
    assert capsys.readouterr().out.startswith("ok height")

    raw = bytearray(chain_path.read_bytes())
    raw[-10] ^= 0x01
    bad = tmp_path / "mutated.chain"
    bad.write_bytes(bytes(raw))
    code = cli.main(["validate-chain", str(bad)])
    captured = capsys.readouterr().out
    assert code in (1, 2)  # invalid chain, or mutation broke the framing

    assert cli.main(["validate-chain", str(tmp_path / "missing.chain")]) == 2


def test_erase_command_scrubs_target_store(sim_out, capsys):
    out = sim_out / "out"
    # carol requested from alice: carol holds a consumer-side pseudonym
    store = keystore.KeyStore.load(str(out / "carol.store"))
    own = store.list_own_pseudonyms(keystore.ROLE_CONSUMER)
    assert own
    assert b"carol" in (out / "alice.store").read_bytes()
    code = cli.main(["erase", "--dir", str(out), "--requester", "carol", "--pseudonym", own[0].hex()])
    assert code == 0
    assert b"carol" not in (out / "alice.store").read_bytes()
    # querying alice's store afterwards reports the entry as anonymized
    code = cli.main(["query", "--chain", str(out / "alice.chain"), "--store", str(out / "alice.store")])
    assert code == 0
    assert "<no-key>" in capsys.readouterr().out


def test_erase_unknown_pseudonym_fails(sim_out, capsys):
    out = sim_out / "out"
    code = cli.main(["erase", "--dir", str(out), "--requester", "carol", "--pseudonym", "00" * 32])
    assert code == 1


def test_keygen_and_shards_roundtrip(tmp_path, capsys):
    store_path = tmp_path / "node.store"
    seed_hex = crypto.digest(b"cli-keygen").hex()
    assert cli.main(["keygen", "--out", str(store_path), "--bits", "2048", "--seed", seed_hex]) == 0
    store = keystore.KeyStore.load(str(store_path))
    original_identity = store.identity_keypair().public_key

    shard_dir = tmp_path / "shards"
    assert cli.main(["shard-export", "--store", str(store_path), "--k", "2", "--m", "3", "--out", str(shard_dir)]) == 0
    shard_files = sorted(os.listdir(shard_dir))
    assert shard_files == ["shard-001.p3sh", "shard-002.p3sh", "shard-003.p3sh"]

    restored_path = tmp_path / "restored.store"
    chosen = [str(shard_dir / shard_files[0]), str(shard_dir / shard_files[2])]
    assert cli.main(["shard-restore", *chosen, "--out", str(restored_path)]) == 0
    restored = keystore.KeyStore.load(str(restored_path))
    assert restored.master.seed == store.master.seed
    assert restored.identity_keypair().public_key == original_identity


def test_shard_restore_insufficient(tmp_path, capsys):
    store_path = tmp_path / "node.store"
    cli.main(["keygen", "--out", str(store_path), "--bits", "2048", "--seed", crypto.digest(b"x").hex()])
    shard_dir = tmp_path / "shards"
    cli.main(["shard-export", "--store", str(store_path), "--k", "2", "--m", "3", "--out", str(shard_dir)])
    only = str(shard_dir / "shard-001.p3sh")
    assert cli.main(["shard-restore", only, "--out", str(tmp_path / "r.store")]) == 1


def test_keygen_bad_seed_rejected(tmp_path):
    assert cli.main(["keygen", "--out", str(tmp_path / "s"), "--seed", "zz"]) == 2
    assert cli.main(["keygen", "--out", str(tmp_path / "s"), "--seed", "aabb"]) == 2


def test_verify_evidence_command(tmp_path, capsys):
    from test_protocol import run_session, BOB, DATUM

    out = run_session(seed=90)
    path = tmp_path / "owner.p3ev"
    cli.write_evidence_file(
        str(path), out["owner_evidence"],
        out["consumer_session"].identity_key.public_key.canonical_bytes(),
    )
    assert cli.main(["verify-evidence", str(path)]) == 0
    assert "VALID" in capsys.readouterr().out

    cpath = tmp_path / "consumer.p3ev"
    cli.write_evidence_file(
        str(cpath), out["consumer_evidence"], BOB.identity_key.public_key.canonical_bytes()
    )
    datum_path = tmp_path / "datum.bin"
    datum_path.write_bytes(DATUM)
    assert cli.main(["verify-evidence", str(cpath), "--datum", str(datum_path)]) == 0

    wrong = tmp_path / "wrong.bin"
    wrong.write_bytes(DATUM + b"x")
    code = cli.main(["verify-evidence", str(cpath), "--datum", str(wrong)])
    assert code == 1
    assert "INVALID" in capsys.readouterr().out


def test_verify_evidence_mutated_file(tmp_path, capsys):
    from test_protocol import run_session

    out = run_session(seed=91)
    path = tmp_path / "owner.p3ev"
    cli.write_evidence_file(
        str(path), out["owner_evidence"],
        out["consumer_session"].identity_key.public_key.canonical_bytes(),
    )
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0x01  # inside the final ack signature
    mutated = tmp_path / "mutated.p3ev"
    mutated.write_bytes(bytes(raw))
    code = cli.main(["verify-evidence", str(mutated)])
    assert code in (1, 2)
