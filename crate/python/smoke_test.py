"""Smoke test for the `bioz` extension module.

Build first with `cargo build --release -p bioz-py`; if `bioz` is not already
importable the script loads target/release/libbioz.so directly.
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_bioz():
    try:
        import bioz

        return bioz
    except ImportError:
        pass
    for name in ("libbioz.so", "libbioz.dylib", "bioz.dll"):
        lib = ROOT / "target" / "release" / name
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("bioz", str(lib))
            spec = importlib.util.spec_from_loader("bioz", loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            sys.modules["bioz"] = module
            return module
    sys.exit("bioz not found; run `cargo build --release -p bioz-py`")


def main():
    bioz = load_bioz()

    geo = bioz.Geometry(0.5)
    assert geo.n_triangles > 0 and len(geo.inner_probes) == 25
    print(geo)

    phantoms = bioz.generate_phantoms(geo, "bovine", 40, seed=3)
    assert len(phantoms) == 40
    assert len(phantoms[0].element_sigma) == geo.n_triangles

    ref = bioz.reference_frame(geo)
    frame = bioz.simulate_frame(phantoms[0], geo)
    v = frame.voltages()
    assert len(v) == 28 and all(len(row) == 25 for row in v)
    assert len(frame.patterns()) == 28

    seqs = [bioz.normalize(bioz.simulate_frame(p, geo), ref, p.label) for p in phantoms]
    assert seqs[0].n_steps == 28 and seqs[0].width == 25
    assert all(-1.0 < x < 1.0 for row in seqs[0].values() for x in row)

    net, curve = bioz.train(seqs[:30], seqs[30:], epochs=5, batch_size=10, seed=1)
    assert len(curve) == 5
    label, p = net.classify(seqs[0])
    assert label in (0, 1) and math.isclose(sum(p), 1.0, abs_tol=1e-12)
    fp = net.evaluate(seqs[30:])
    print("fp eval", fp)

    q5 = net.quantize(5)
    assert q5.bits == 5
    print("5-bit eval", q5.evaluate(seqs[30:]))

    h = net.trajectory(seqs[0])
    i_h = net.current_mode(seqs[0], 25.0)
    assert max(abs(a / 25.0 - b) for ra, rb in zip(i_h, h) for a, b in zip(ra, rb)) < 1e-12

    budget = bioz.hardware_budget()
    assert abs(budget["chip_area_mm2"] - 30.0) < 0.1
    assert abs(budget["power_mw"] - 38.775) < 1e-9

    with tempfile.TemporaryDirectory() as tmp:
        path = pathlib.Path(tmp) / "model.afua"
        net.save(path)
        again = bioz.Network.load(path)
        assert again.classify(seqs[0]) == net.classify(seqs[0])

        toml = "\n".join(
            [
                "[mesh]",
                "edge_length = 0.5",
                "[phantoms]",
                'model = "bovine"',
                "count = 40",
                "[training]",
                "epochs = 2",
                "batch_size = 10",
            ]
        )
        summary = bioz.run_pipeline(pathlib.Path(tmp) / "run", toml)
        assert summary["generate"]["phantoms"] == 40
        print("pipeline sweep", summary["sweep"])

    try:
        bioz.Network(4, 3).quantize(2)
    except ValueError as e:
        print("rejected 2 bits:", e)
    else:
        raise AssertionError("2-bit quantization should fail")

    print("smoke test ok")


if __name__ == "__main__":
    main()
