"""
核心模組
"""

from .canonical import Digest, compute_digest
from .ledger import Block, Chain, Transaction, seal_block, validate_chain
from .membership import MembershipRegistry, PeerIdentity, Role, generate_identity
from .contracts import WorkflowDescription, execute_contract
from .provenance import ProvenanceRecord, ProvTree, EventLogRecord
from .network import SimNetwork, decide, propose_transaction
from .access import Channel, Query, walk
from .workload import run_network

__all__ = [
    'Digest', 'compute_digest',
    'Block', 'Chain', 'Transaction', 'seal_block', 'validate_chain',
    'MembershipRegistry', 'PeerIdentity', 'Role', 'generate_identity',
    'WorkflowDescription', 'execute_contract',
    'ProvenanceRecord', 'ProvTree', 'EventLogRecord',
    'SimNetwork', 'decide', 'propose_transaction',
    'Channel', 'Query', 'walk',
    'run_network',
]
