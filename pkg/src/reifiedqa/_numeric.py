import numpy as np


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max())
    return z / z.sum()


def softmax_backward(probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return probs * (grad - probs @ grad)


def segment_softmax(logits: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Softmax within contiguous segments beginning at ``starts`` (all nonempty)."""
    seg = np.repeat(np.arange(starts.size), np.diff(np.append(starts, logits.size)))
    z = np.exp(logits - np.maximum.reduceat(logits, starts)[seg])
    return z / np.add.reduceat(z, starts)[seg]


def segment_ids(starts: np.ndarray, total: int) -> np.ndarray:
    return np.repeat(np.arange(starts.size), np.diff(np.append(starts, total)))
