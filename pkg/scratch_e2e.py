"""Scratch end-to-end run (not part of the package)."""
import time
from pathlib import Path

import numpy as np

from taintradar.data import make_toy_dataset, default_architecture
from taintradar.models import build_model, train, TrainConfig, accuracy, save_model, load_model, predict_batch

CACHE = Path("/root/pkg/.cache")
CACHE.mkdir(exist_ok=True)

def get_model_and_data():
    X, y = make_toy_dataset(n=6000, seed=7)
    train_x, train_y = X[1000:], y[1000:]
    test_x, test_y = X[:1000], y[:1000]
    model_path = CACHE / "toy_model.trm1"
    if model_path.exists():
        model = load_model(model_path)
    else:
        model = build_model(default_architecture(), seed=0)
        t0 = time.time()
        res = train(model, (train_x, train_y), TrainConfig(epochs=10, batch_size=64, seed=0))
        print(f"trained in {time.time()-t0:.1f}s, val acc {res.accuracy:.4f}")
        save_model(model, model_path)
    acc = accuracy(model, test_x, test_y)
    print(f"test accuracy: {acc:.4f}")
    return model, (train_x, train_y), (test_x, test_y)

if __name__ == "__main__":
    model, (trx, try_), (tex, tey) = get_model_and_data()
