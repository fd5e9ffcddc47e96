import json
import logging
from pathlib import Path

from django.dispatch import Signal, receiver

logger = logging.getLogger(__name__)

# Sent by every command once its outputs are written.
# Arguments: command (str), out_dir (Path), summary (dict of JSON-ready values)
run_completed = Signal()

RUN_INDEX = "runs.jsonl"


@receiver(run_completed)
def record_run(sender, command, out_dir, summary, **kwargs):
    """
    Logs the run and appends one line to the run index in the output
    directory. A failure to write the index never fails the run.
    """
    logger.info(f"{command} finished: {summary}")
    try:
        index = Path(out_dir) / RUN_INDEX
        with index.open("a", encoding="utf-8") as handle:
            handle.write(json.dumps({"command": command, **summary}, sort_keys=True) + "\n")
    except OSError as e:
        logger.error(f"Could not append to the run index in {out_dir}: {e}", exc_info=True)
