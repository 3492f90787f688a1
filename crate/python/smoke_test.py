"""Smoke test for the tagsong Python extension.

Build and install first:  pip install --no-build-isolation ./crates/python
"""

import json
import math
import random
import tempfile
from pathlib import Path

import tagsong_py as ts


def write_fixture(root: Path, songs: int = 8, images: int = 6, vocab: int = 12, dim: int = 6):
    rng = random.Random(0)
    words = [f"word{i}" for i in range(vocab)]
    with open(root / "embeddings.txt", "w") as f:
        f.write(f"{vocab} {dim}\n")
        for w in words:
            f.write(w + " " + " ".join(f"{rng.uniform(-1, 1):.6f}" for _ in range(dim)) + "\n")
    (root / "tag_names.txt").write_text("\n".join(words + words) + "\n")
    with open(root / "triplets.jsonl", "w") as f:
        for s in range(songs):
            lyric = rng.sample(range(vocab), 3)
            for i in range(images):
                tags = [rng.uniform(0, 0.1) for _ in range(2 * vocab)]
                for w in lyric:
                    tags[w] = rng.uniform(0.7, 1.0)
                record = {
                    "id": f"img{s}_{i}",
                    "song_id": f"song{s}",
                    "lyric": " ".join(words[w] for w in lyric),
                    "tags": tags,
                    "mood": None,
                    "favorite_count": i + 1,
                }
                f.write(json.dumps(record) + "\n")


def main():
    assert ts.preprocess_lyric("The Sun, and the RAIN!") == ["sun", "rain"]

    loss, grad = ts.mse_loss([0.5, 0.5], [0.0, 1.0])
    assert math.isclose(loss, 0.5) and len(grad) == 2
    loss, _, _ = ts.margin_loss([1.0, 0.0], [1.0, 0.0], [0.0, 1.0])
    assert loss == 0.0

    scores = [[0.9, 0.1, 0.5], [0.2, 0.3, 0.1]]
    relevant = [[True, False, False], [True, False, False]]
    assert ts.recall_at_k(scores, relevant, 1) == 50.0
    assert ts.median_rank(scores, relevant) == 1.5

    a, b = ts.Rng(42), ts.Rng(42)
    assert [a.next_u64() for _ in range(3)] == [b.next_u64() for _ in range(3)]

    max_err, passed = ts.gradient_check("conse", "mse", 0)
    assert passed and max_err < 1e-4

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        write_fixture(root)
        space = ["--tag-dim", "24", "--object-tags", "12"]
        train_ids, test_ids = ts.split_triplets(str(root / "triplets.jsonl"), 24, "dagger", 1, 2)
        assert len(train_ids) == 30 and len(test_ids) == 10

        code = ts.run_cli(["prepare", "--triplets", str(root / "triplets.jsonl"),
                           "--split", str(root / "split.json"), "--test-songs", "2"] + space)
        assert code == 0
        code = ts.run_cli(["train", "--triplets", str(root / "split.filtered.jsonl"),
                           "--split", str(root / "split.json"),
                           "--embeddings", str(root / "embeddings.txt"), "--embed-dim", "6",
                           "--tag-names", str(root / "tag_names.txt"),
                           "--checkpoint", str(root / "model.json"),
                           "--model", "ours-attention", "--hidden", "4", "--attention-dim", "4",
                           "--mlp-hidden", "8", "--epochs", "2", "--batch", "10"] + space)
        assert code == 0

        model = ts.Model.load(str(root / "model.json"), str(root / "embeddings.txt"),
                              str(root / "tag_names.txt"))
        assert model.kind == "ours-attention"
        images, songs, matrix = model.score_file(str(root / "split.filtered.jsonl"))
        assert len(matrix) == len(images) == 40 and len(matrix[0]) == len(songs) == 8
        assert all(-1.0 <= x <= 1.0 for row in matrix for x in row)
        assert len(model.project("word1 word2", [0.5] * 24)) == 24

    print("python smoke test passed")


if __name__ == "__main__":
    main()
