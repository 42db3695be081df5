"""Smoke test for the Python bindings.

Install with `pip install --no-build-isolation -e crates/py`, then run
`python python/smoke_test.py` from the repository root.
"""

import json
import pathlib

import tensorvirt

FIXTURES = pathlib.Path(__file__).resolve().parent.parent / "crates" / "core" / "fixtures"


def read(name):
    return (FIXTURES / name).read_text()


def main():
    assert tensorvirt.slice_count(5) == 2
    assert tensorvirt.slice_count(8) == 2

    # 2D texture, order HSWBDC4: channel 6 of a [1,2,3,7] tensor is slice 1, lane 2
    texel, lane = tensorvirt.translate([1, 2, 3, 7], "texture-2d", [0, 1, 2, 0, 6])
    assert (texel, lane) == ([2, 3], 2), (texel, lane)

    p = tensorvirt.plan(read("diffusion_like.json"))
    assert p["arena"] < p["naive"] and p["savings"] >= 0.8, p

    fused, report = tensorvirt.fuse(read("gated_fc.json"))
    assert "fc-two-branch-prologue" in report, report
    assert len(json.loads(fused)["nodes"]) < len(json.loads(read("gated_fc.json"))["nodes"])

    kernels = tensorvirt.compile(read("llm_block.json"), device="mobile-texture", stage="decode")
    assert kernels and all(src.strip() for src in kernels.values())

    out = json.loads(tensorvirt.run(read("identity.json"), read("inputs/identity.json")))
    given = json.loads(read("inputs/identity.json"))
    assert out["y"]["values"] == given["x"]["values"]

    try:
        tensorvirt.plan("{}")
    except ValueError:
        pass
    else:
        raise AssertionError("malformed graph accepted")

    print("python smoke test ok")


if __name__ == "__main__":
    main()
