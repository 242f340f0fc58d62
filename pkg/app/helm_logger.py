"""
Helm log shipping for pimsim.

Service and simulator log records are queued and posted in batches to
Helm's ingest endpoint by a daemon thread. Entries emitted while a run
executes carry its run id; entries emitted inside a Flask request carry
the request path and method.
"""

import os
import logging
import requests
import threading
import time
import queue
from contextlib import contextmanager
from contextvars import ContextVar
from datetime import datetime, timezone
from typing import Optional, Dict, Any, List
from flask import has_request_context, request

INGEST_PATH = '/api/logs/ingest'
SIMULATOR_LOGGERS = ('pimsim', 'app')
FLASK_LOGGERS = ('werkzeug', 'flask.app')

_current_run: ContextVar[Optional[str]] = ContextVar('pimsim_run_id', default=None)


@contextmanager
def run_context(run_id: str):
    """Tag log entries emitted inside the block with run_id."""
    token = _current_run.set(run_id)
    try:
        yield
    finally:
        _current_run.reset(token)


class HelmLogHandler(logging.Handler):
    """Bridges stdlib logging records into a HelmLogger queue."""

    def __init__(self, helm_logger: 'HelmLogger'):
        super().__init__()
        self.helm_logger = helm_logger

    def emit(self, record):
        try:
            level = record.levelname if record.levelname in HelmLogger.LEVELS else 'INFO'
            self.helm_logger.log(level, self.format(record), {'logger': record.name})
        except Exception:
            self.handleError(record)


class HelmLogger:
    """
    Queue of log entries posted to Helm by a background sender.

    A batch goes out once batch_size entries are waiting or flush_interval
    seconds have passed since the last post; shutdown() posts the rest.
    The bearer token comes from HELM_SERVICE_TOKEN; without one, entries
    are posted unauthenticated.
    """

    LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')

    def __init__(self, service_name: str, helm_url: str = None, batch_size: int = 10, flush_interval: int = 5):
        self.service_name = service_name
        self.ingest_url = (helm_url or os.environ.get('HELM_SERVICE_URL', 'http://localhost:5004')).rstrip('/') \
            + INGEST_PATH
        self.batch_size = batch_size
        self.flush_interval = flush_interval
        self.token = os.environ.get('HELM_SERVICE_TOKEN')

        self._entries: queue.Queue = queue.Queue()
        self._stopping = threading.Event()

        # Failures are reported here; this logger never reaches the Helm handler
        self._console = logging.getLogger('pimsim.helm')
        self._console.propagate = False
        if not self._console.handlers:
            self._console.addHandler(logging.StreamHandler())

        self._sender = threading.Thread(target=self._run_sender, name='helm-sender', daemon=True)
        self._sender.start()

    def _post(self, batch: List[dict]):
        headers = {'Authorization': f'Bearer {self.token}'} if self.token else {}
        try:
            response = requests.post(self.ingest_url, json={'service_name': self.service_name, 'logs': batch},
                                     headers=headers, timeout=5)
        except requests.RequestException as e:
            self._console.error(f"Helm unreachable, dropped {len(batch)} log entries: {e}")
            return
        if response.status_code != 200:
            self._console.error(f"Helm rejected {len(batch)} log entries: {response.status_code} {response.text}")

    def _run_sender(self):
        batch = []
        last_post = time.monotonic()
        while not self._stopping.is_set():
            try:
                batch.append(self._entries.get(timeout=1))
            except queue.Empty:
                pass
            due = time.monotonic() - last_post >= self.flush_interval
            if len(batch) >= self.batch_size or (batch and due):
                self._post(batch)
                batch = []
                last_post = time.monotonic()

        while True:
            try:
                batch.append(self._entries.get_nowait())
            except queue.Empty:
                break
        if batch:
            self._post(batch)

    def log(self, level: str, message: str, context: Dict[str, Any] = None):
        """Queue one entry; context is copied and extended with run and request details."""
        level = level.upper()
        if level not in self.LEVELS:
            raise ValueError(f"unknown log level {level!r}")
        context = dict(context or {})
        run_id = _current_run.get()
        if run_id:
            context['run_id'] = run_id
        if has_request_context():
            context['path'] = request.path
            context['method'] = request.method
        self._entries.put({
            'level': level,
            'message': message,
            'timestamp': datetime.now(timezone.utc).isoformat(),
            'context': context,
        })

    def debug(self, message: str, context: Dict[str, Any] = None):
        self.log('DEBUG', message, context)

    def info(self, message: str, context: Dict[str, Any] = None):
        self.log('INFO', message, context)

    def warning(self, message: str, context: Dict[str, Any] = None):
        self.log('WARNING', message, context)

    def error(self, message: str, context: Dict[str, Any] = None):
        self.log('ERROR', message, context)

    def critical(self, message: str, context: Dict[str, Any] = None):
        self.log('CRITICAL', message, context)

    def shutdown(self):
        """Stop the sender after it posts everything queued so far."""
        self._stopping.set()
        self._sender.join(timeout=10)


_helm_logger: Optional[HelmLogger] = None


def init_helm_logger(service_name: str, helm_url: str = None, capture_flask_logs: bool = True) -> HelmLogger:
    """
    Create the process-wide HelmLogger and attach it to the pimsim and app
    loggers (and the Flask loggers when capture_flask_logs is set) at INFO.
    """
    global _helm_logger
    _helm_logger = HelmLogger(service_name, helm_url)

    handler = HelmLogHandler(_helm_logger)
    handler.setLevel(logging.INFO)
    names = SIMULATOR_LOGGERS + (FLASK_LOGGERS if capture_flask_logs else ())
    for name in names:
        target = logging.getLogger(name)
        target.addHandler(handler)
        if target.level == logging.NOTSET or target.level > logging.INFO:
            target.setLevel(logging.INFO)
    return _helm_logger
