"""Smoke test for the `subgc` Python extension.

Build and install first, e.g.:
    maturin build --release -m crates/py/Cargo.toml -o dist && pip install dist/subgc-*.whl
"""

import json
import tempfile
from pathlib import Path

import subgc


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        subgc.generate_fixtures(str(root / "fx"), images=6, seed=2)

        g = subgc.SceneGraph.load(str(root / "fx/graphs/img000.json"), 16)
        assert len(g) == 7 and len(g.triplets) >= 2, g
        subs = subgc.sample_subgraphs(g, num=50, seed=1)
        assert subs and all(len(s) >= 1 for s in subs)
        assert subgc.node_iou(subs[0], subs[0]) == 1.0

        kept = subgc.nms(subs, [1.0 / (i + 1) for i in range(len(subs))], 0.5)
        for i, (a, _) in enumerate(kept):
            for b, _ in kept[i + 1:]:
                assert subgc.node_iou(a, b) < 0.5

        try:
            subgc.SubGraph(g, [], [])
        except ValueError:
            pass
        else:
            raise AssertionError("empty sub-graph accepted")

        assert abs(subgc.bleu(["a b"], [["a c"]], 1) - 0.5) < 1e-12
        assert abs(subgc.div_n([["a b"], ["a c"]], 1) - 0.75) < 1e-12
        assert abs(subgc.mbleu4([["a man riding a horse"]] * 5) - 1.0) < 1e-12

        passed, e_sgpn, e_dec = subgc.gradcheck()
        assert passed, (e_sgpn, e_dec)

        cfg = root / "cfg.json"
        cfg.write_text(json.dumps({
            "optimizer": {"lr": 0.005},
            "sampling": {"num": 150},
            "train": {"sgpn_steps": 150, "decoder_steps": 400},
        }))
        model = subgc.Model.train(str(root / "fx"), config=str(cfg), seed=1)
        assert model.has_decoder
        assert 0.0 <= model.score(g, subs[0]) <= 1.0

        pred = json.loads(model.caption(g, top=3))
        assert pred["image_id"] == "img000" and len(pred["captions"]) >= 1
        first = pred["captions"][0]
        assert len(first["alignments"]) == len(first["tokens"])
        for a in first["alignments"]:
            assert a["node"] in first["subgraph"]["nodes"]

        again = json.loads(model.caption(g, top=3, topk=3, temperature=0.6, seed=5))
        assert again == json.loads(model.caption(g, top=3, topk=3, temperature=0.6, seed=5))

        ckpt = root / "m.json"
        model.save(str(ckpt))
        assert subgc.Model.load(str(ckpt)).caption(g, top=3) == model.caption(g, top=3)

        print("captions:", [" ".join(c["tokens"]) for c in pred["captions"]])
    print("smoke test passed")


if __name__ == "__main__":
    main()
