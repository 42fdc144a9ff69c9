import shutil
import sys
from pathlib import Path

import pytest
import yaml

sys.path.insert(0, str(Path(__file__).parent))

MINI = Path(__file__).parent / "fixtures" / "mini"


def mini_config_dict(**overrides) -> dict:
    cfg = {
        "paths": {
            "topics": "topics.json",
            "qrels": "qrels.txt",
            "collection": "collection.tsv",
            "train_topics": "train_topics.json",
            "train_annotations": "train_annotations.tsv",
            "cache_dir": "cache",
            "output_dir": "output",
        },
        "retriever": {"depth": 100},
        "gateway": {"endpoint": "http://chat.test/v1/chat/completions", "backoff": 0.0, "parallelism": 2},
        "embedding": {"endpoint": "http://embed.test/v1/embeddings", "backoff": 0.0, "batch_size": 8},
        "grid": {
            "strategies": ["none", "all", "human", "automatic", "llm", "str", "sar"],
            "shots": [0, 1],
            "retrievers": ["sparse", "dense"],
        },
        "seed": 7,
    }
    for k, v in overrides.items():
        cfg[k] = v
    return cfg


@pytest.fixture
def mini_dir():
    return MINI


@pytest.fixture
def workspace(tmp_path):
    """Copy of the mini fixture with a config file; returns the config path."""
    for f in MINI.iterdir():
        shutil.copy(f, tmp_path / f.name)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(mini_config_dict()))
    return path
