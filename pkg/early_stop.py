import json
import math
import os
from collections import deque


class PatienceTracker:
    """
    Tracks validation losses and decides when training has stopped improving.
    Persists the history in a JSON file so it survives restarts.
    """

    def __init__(self, history_file=None, patience=10, min_delta=0.0):
        """
        :param history_file: Path to a JSON file where we store validation losses (None = memory only).
        :param patience: Evaluations without improvement before stopping (default=10).
        :param min_delta: Improvement smaller than this does not reset patience.
        """
        self.history_file = history_file
        self.patience = patience
        self.min_delta = min_delta
        self.history = deque()  # validation losses, oldest first
        self.best = math.inf
        self.best_index = -1

        # Load existing history from file
        self.load_history()

    def load_history(self):
        """Load existing losses from the JSON file and replay them."""
        self.history = deque()
        self.best, self.best_index = math.inf, -1
        if self.history_file and os.path.exists(self.history_file):
            with open(self.history_file, "r", encoding="utf-8") as f:
                data = json.load(f)
            for loss in data.get("history", []):
                self._push(loss)

    def reset(self):
        """Forget every recorded loss and truncate the history file."""
        self.history = deque()
        self.best, self.best_index = math.inf, -1
        self.save_history()

    def save_history(self):
        """Save current losses to the JSON file."""
        if not self.history_file:
            return
        tmp = f"{self.history_file}.tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump({"history": list(self.history), "best": self.best, "patience": self.patience}, f)
        os.replace(tmp, self.history_file)

    def _push(self, loss):
        self.history.append(float(loss))
        if loss < self.best - self.min_delta:
            self.best = float(loss)
            self.best_index = len(self.history) - 1
            return True
        return False

    @property
    def bad_epochs(self):
        return len(self.history) - 1 - self.best_index if self.history else 0

    def update(self, loss):
        """
        Record a new validation loss and save to file.
        Returns True if it is the best loss so far.
        """
        improved = self._push(loss)
        self.save_history()
        return improved

    def should_stop(self):
        """True once ``patience`` evaluations in a row brought no improvement."""
        return self.bad_epochs >= self.patience
