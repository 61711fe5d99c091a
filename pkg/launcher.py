import subprocess
import sys
import time


def run_concurrently(commands, max_parallel=None, cwd=None):
    """
    Start every command (a list of argv lists, run with this interpreter) as
    its own process, at most ``max_parallel`` at a time, and wait for all.
    Returns the exit codes in command order.
    """
    limit = max_parallel or len(commands)
    pending = list(enumerate(commands))
    running = {}
    codes = [None] * len(commands)

    while pending or running:
        # Start as many scripts as the limit allows.
        while pending and len(running) < limit:
            index, argv = pending.pop(0)
            running[index] = subprocess.Popen([sys.executable] + list(argv), cwd=cwd)
        # Collect whatever has finished.
        for index, process in list(running.items()):
            code = process.poll()
            if code is not None:
                codes[index] = code
                del running[index]
        if running:
            time.sleep(0.1)

    return codes
