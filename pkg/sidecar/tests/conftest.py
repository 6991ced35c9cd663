import pytest


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    """A small randomly initialized BERT saved locally, so tests run without
    hub access; the sidecar takes any model id transformers can resolve,
    including a directory path."""
    import torch
    from transformers import BertConfig, BertModel, BertTokenizer

    model_dir = tmp_path_factory.mktemp("tiny-encoder")
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    vocab += [f"tok{i}" for i in range(40)]
    vocab += ["wind", "energy", "climate", "change", "solar", "soil", "carbon"]
    vocab_file = model_dir / "vocab.txt"
    vocab_file.write_text("\n".join(vocab), encoding="utf-8")

    torch.manual_seed(1234)
    config = BertConfig(
        vocab_size=len(vocab),
        hidden_size=16,
        num_hidden_layers=1,
        num_attention_heads=2,
        intermediate_size=32,
        max_position_embeddings=64,
    )
    BertModel(config).save_pretrained(model_dir)
    BertTokenizer(vocab_file=str(vocab_file)).save_pretrained(model_dir)
    return model_dir


@pytest.fixture
def write_jsonl(tmp_path):
    import json

    def _write(lines, name="texts.jsonl"):
        path = tmp_path / name
        with path.open("w", encoding="utf-8") as handle:
            for line in lines:
                handle.write(line if isinstance(line, str) else json.dumps(line))
                handle.write("\n")
        return path

    return _write
