"""Smoke test for the macnet_py extension.

Build first:
    cargo build --release -p macnet-py --features extension-module
then run:
    python3 python/smoke_test.py
"""

import importlib.machinery
import importlib.util
import json
import math
import os
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_extension():
    try:
        import macnet_py

        return macnet_py
    except ImportError:
        pass
    candidates = [os.environ.get("MACNET_PY_LIB")] + [
        str(ROOT / "target" / profile / "libmacnet_py.so") for profile in ("release", "debug")
    ]
    for path in filter(None, candidates):
        if os.path.exists(path):
            loader = importlib.machinery.ExtensionFileLoader("macnet_py", path)
            spec = importlib.util.spec_from_file_location("macnet_py", path, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("macnet_py not found; build it with cargo first")


def main():
    m = load_extension()

    assert m.em_f1("a b", "b c") == (0.0, 0.5)
    assert m.rouge(["a b c"], ["a c d"])[1] == 0.0
    assert abs(m.bleu(["x y z w"], ["x y z w"]) - 1.0) < 1e-12
    assert abs(m.focal_loss([0.5], 2.0) - 0.25 * math.log(2)) < 1e-12
    assert set(m.MACNET_MODES) == {"off", "enc", "model", "full", "random-init"}

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        data, mc, s2s = tmp / "data", tmp / "mc", tmp / "s2s"
        m.gen_data(data, qa_train=40, pairs_train=60, pairs_dev=10)
        assert m.run("pretrain-mc", data=data, out=mc, epochs=1)

        ckpt = m.Checkpoint.load(mc / "mc.ckpt")
        assert ckpt.kind == "mc" and len(ckpt) > 0
        bundle = ckpt.extract_bundle(freeze_encoder=True)
        assert bundle.kind == "bundle"
        assert any(n.startswith("mc.enc") for n in bundle.names())
        freeze = json.loads(bundle.metadata_json())["freeze"]
        assert freeze == {"encoder": True, "modeling": False}, freeze
        name = bundle.names()[0]
        assert bundle.values(name) == ckpt.values(name)

        assert m.run("train-seq2seq", data=data, out=s2s, mc=mc / "mc.ckpt", macnet="full", epochs=1)
        tr = m.Translator.load(s2s / "seq2seq.ckpt", decode="beam:2")
        assert tr.mode == "full"
        assert isinstance(tr.translate("t1 t2 t3"), str)

        try:
            m.run("train-seq2seq", data=data, out=s2s, epochs=1)
        except m.MacnetError as e:
            assert "refusing to overwrite" in str(e), e
        else:
            raise AssertionError("existing output should be refused")

    checks = m.gradcheck()
    assert checks and all(ok for _, ok, _ in checks), [c for c in checks if not c[1]]
    print(f"ok: {len(checks)} gradient checks, bindings exercised")


if __name__ == "__main__":
    main()
