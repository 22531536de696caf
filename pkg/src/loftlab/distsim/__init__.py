"""Simulated multi-worker training and communication accounting."""

from .ledger import PROTOCOLS, REPORT_HEADERS, CommLedger, RoundRecord, analytic_round_bytes, comm_cost_gpipe, ledger_report
from .protocol import Protocol, ScheduleConfig
from .simulation import LocalSGDProtocol, LoftProtocol, make_protocol, run_local_sgd, run_loft_pretrain
