import time

import numpy as np


class StepAggregator:
    """
    Collects per-step training records and flushes them as one summary line
    every ``flush_every`` steps.
    """
    def __init__(self, flush_every=50):
        """
        :param flush_every: how many records to buffer before a flush is due.
        """
        self.flush_every = flush_every
        self.buffer = []
        self.records = []
        self.last_flush_time = time.time()

    def add(self, step, loss, lr):
        """
        Add one step's record to the buffer.
        """
        self.buffer.append({"step": step, "loss": float(loss), "lr": float(lr), "wall": time.time()})

    def should_flush(self):
        """
        True once the buffer holds ``flush_every`` records.
        If we have no records, returns False.
        """
        return bool(self.buffer) and len(self.buffer) >= self.flush_every

    def flush(self):
        """
        Returns a summary line for the buffered records and clears the buffer.
        """
        if not self.buffer:
            return ""
        now = time.time()
        last = self.buffer[-1]
        mean_loss = float(np.mean([r["loss"] for r in self.buffer]))
        line = (f"step {last['step']} loss {mean_loss:.4f} lr {last['lr']:.2e} "
                f"({(now - self.last_flush_time) / len(self.buffer) * 1000:.1f} ms/step)")
        self.records.extend(self.buffer)
        self.buffer.clear()
        self.last_flush_time = now
        return line

    def to_tsv(self):
        """All flushed records as tab-separated text (step, loss, lr, wall-clock)."""
        return records_to_tsv(self.records)


def records_to_tsv(records):
    lines = ["step\tloss\tlr\twall"]
    lines += [f"{r['step']}\t{r['loss']:.6f}\t{r['lr']:.6e}\t{r['wall']:.3f}" for r in records]
    return "\n".join(lines) + "\n"


def plot_records(records, path):
    """Training loss against step, saved as a PNG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot([r["step"] for r in records], [r["loss"] for r in records], linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("Training loss", fontsize=12)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
