import pytest

from ledgerflow.core.canonical import compute_digest
from ledgerflow.core.contracts import (
    WORKFLOW_KEY,
    ExecutionContext,
    Step,
    WorkflowDescription,
    parse_workflow_notation,
    run_workflow,
)
from ledgerflow.core.ledger import Chain, Transaction, seal_block
from ledgerflow.core.provenance import (
    KEY_EMBEDDED,
    KEY_REF_DIGEST,
    KEY_REF_URI,
    KEY_STANDARD,
    PARENT_KEY,
    STANDARD_EVENTS,
    STANDARD_TREE,
    CaptureMode,
    EdgeKind,
    EmbeddedProvenance,
    EntityKind,
    ProvenanceRecord,
    ProvenanceReference,
    Representation,
    WorkflowModification,
    attach_provenance,
    build_event_record,
    build_tree_record,
    capture_provenance,
    derive_workflow,
    extract_record,
    reconstruct_workflow,
)
from ledgerflow.core.storage import ResourceStore
from ledgerflow.utils.errors import (
    DigestMismatch,
    EmptyTrace,
    InconsistentTrace,
    IrrecoverableRecord,
    MalformedWorkflow,
    NoProvenance,
    ReservedKeyCollision,
    UnknownParent,
    UnresolvableReference,
)


def _execute(notation, context, start=10):
    workflow = parse_workflow_notation(notation)
    return workflow, run_workflow(workflow, context, start)


def _captured(notation, context, mode, representation):
    workflow, result = _execute(notation, context)
    tx = Transaction('a' * 64, 'b' * 64, 'asset', 'workflow_execution', 10,
                     {WORKFLOW_KEY: workflow.serialize()})
    return capture_provenance(tx, result, workflow, mode, representation, context.resources)


def test_tree_counts_match_event_log(context):
    workflow, result = _execute('scale:B>B2@factor=2,linreg:B2>A,store:A>C', context)
    tree = build_tree_record(result.execution_trace, workflow)
    events = build_event_record(result.execution_trace, workflow)

    names = set()
    expected_activities = expected_edges = 0
    for event in events.events:
        names.update(event.input_digests)
        names.update(event.output_digests)
        if event.op == 'store':
            expected_edges += 1
        else:
            expected_activities += 1
            expected_edges += 2
    assert tree.node_count == len(names) + expected_activities
    assert tree.edge_count == expected_edges
    assert tree.graph().number_of_nodes() == tree.node_count


def test_backward_walk_reverses_event_order(context):
    workflow, result = _execute('scale:B>B2@factor=2,linreg:B2>A,store:A>C', context)
    tree = build_tree_record(result.execution_trace, workflow)
    events = build_event_record(result.execution_trace, workflow)
    assert list(reversed(tree.walk_backward())) == events.walk_forward()
    assert tree.activity_ops() == events.ops()


def test_tree_shape(context):
    workflow, result = _execute('linreg:B>A,store:A>C', context)
    tree = build_tree_record(result.execution_trace, workflow, {'wall_time': 'noon'})
    assert tree.root == 'A'
    assert tree.entity('A').kind is EntityKind.ASSET
    assert tree.entity('A').attributes == {'wall_time': 'noon'}
    assert tree.entity('B').kind is EntityKind.DATASET
    stored = tree.entity('C')
    assert stored.kind is EntityKind.FILE
    assert stored.location == ResourceStore.uri_for(stored.digest)
    kinds = sorted(edge.kind.value for edge in tree.edges)
    assert kinds == [EdgeKind.GENERATED_BY.value, EdgeKind.STORED_IN.value, EdgeKind.USED.value]


def test_store_only_workflow_roots_at_input(context):
    workflow, result = _execute('store:B>F', context)
    tree = build_tree_record(result.execution_trace, workflow)
    assert tree.root == 'B'
    assert tree.walk_backward() == ['step00.store']


def test_tree_rejects_steps_off_the_root_path(context):
    with pytest.raises(MalformedWorkflow):
        parse_workflow_notation('linreg:B>A,scale:B>S@factor=2')
    workflow = WorkflowDescription((Step.simple('linreg', 'B', 'A'),
                                    Step.simple('scale', 'B', 'S', factor='2')))
    _, first = _execute('linreg:B>A', context)
    _, second = _execute('scale:B>S@factor=2', context, start=11)
    trace = first.execution_trace + second.execution_trace
    with pytest.raises(InconsistentTrace):
        build_tree_record(trace, workflow)


def test_trace_must_match_workflow(context):
    workflow, result = _execute('linreg:B>A', context)
    other = parse_workflow_notation('scale:B>A@factor=2')
    with pytest.raises(InconsistentTrace):
        build_tree_record(result.execution_trace, other)
    with pytest.raises(InconsistentTrace):
        build_tree_record((), workflow)
    with pytest.raises(EmptyTrace):
        build_event_record((), workflow)


def test_event_record_inputs_and_outputs(context):
    workflow, result = _execute('scale:B>B2@factor=2,linreg:B2>A', context)
    events = build_event_record(result.execution_trace, workflow)
    assert set(events.inputs) == {'B'}
    assert set(events.outputs) == {'B2', 'A'}
    assert events.workflow == workflow


def test_embedded_round_trip(context):
    tx = _captured('linreg:B>A,store:A>C', context, CaptureMode.EMBEDDED, Representation.TREE)
    assert KEY_EMBEDDED in tx.state and KEY_REF_URI not in tx.state
    record = extract_record(tx, ResourceStore())
    assert record.mode is CaptureMode.EMBEDDED
    assert record.content.tree is not None
    assert reconstruct_workflow(record) == parse_workflow_notation('linreg:B>A,store:A>C')


def test_reference_round_trip(context):
    tx = _captured('linreg:B>A', context, CaptureMode.REFERENCE, Representation.EVENTS)
    assert KEY_EMBEDDED not in tx.state
    assert tx.state[KEY_STANDARD] == STANDARD_EVENTS
    record = extract_record(tx, context.resources)
    assert record.mode is CaptureMode.REFERENCE
    assert record.resolved.events is not None
    assert reconstruct_workflow(record) == parse_workflow_notation('linreg:B>A')


def test_both_mode_carries_matching_digest(context):
    tx = _captured('linreg:B>A', context, CaptureMode.BOTH, Representation.TREE)
    assert tx.state[KEY_STANDARD] == STANDARD_TREE
    assert compute_digest(tx.state[KEY_EMBEDDED].encode('utf-8')).hex() == \
        tx.state[KEY_REF_DIGEST]
    record = extract_record(tx, context.resources)
    assert record.mode is CaptureMode.BOTH

    tampered = tx.with_state({**tx.state, KEY_REF_DIGEST: compute_digest(b'x').hex()})
    with pytest.raises(DigestMismatch):
        extract_record(tampered, context.resources)


def test_both_mode_checks_stored_resource(context):
    tx = _captured('linreg:B>A', context, CaptureMode.BOTH, Representation.EVENTS)
    key = ResourceStore.key_from_uri(tx.state[KEY_REF_URI])
    context.resources._data[key] = b'{"changed":1}'
    with pytest.raises(DigestMismatch):
        extract_record(tx, context.resources)


def test_both_mode_without_resource_uses_embedded(context):
    tx = _captured('linreg:B>A', context, CaptureMode.BOTH, Representation.EVENTS)
    record = extract_record(tx, ResourceStore())
    assert record.mode is CaptureMode.BOTH
    assert reconstruct_workflow(record) == parse_workflow_notation('linreg:B>A')


@pytest.mark.parametrize('uri', ['resources/../../registry.txt', 'resources/' + 'A' * 64])
def test_reference_uri_must_be_a_digest(context, uri):
    tx = _captured('linreg:B>A', context, CaptureMode.REFERENCE, Representation.EVENTS)
    with pytest.raises(UnresolvableReference):
        extract_record(tx.with_state({**tx.state, KEY_REF_URI: uri}), context.resources)


def test_modified_resource_is_detected(context):
    tx = _captured('linreg:B>A', context, CaptureMode.REFERENCE, Representation.EVENTS)
    uri = tx.state[KEY_REF_URI]
    path_key = ResourceStore.key_from_uri(uri)
    context.resources._data[path_key] = b'{"changed":1}'
    with pytest.raises(DigestMismatch):
        extract_record(tx, context.resources)


def test_missing_resource_is_unresolvable(context):
    tx = _captured('linreg:B>A', context, CaptureMode.REFERENCE, Representation.EVENTS)
    with pytest.raises(UnresolvableReference):
        extract_record(tx, ResourceStore())


def test_no_provenance():
    tx = Transaction('a' * 64, 'b' * 64, 'x', 'workflow_execution', 1, {'k': 'v'})
    with pytest.raises(NoProvenance):
        extract_record(tx, ResourceStore())


def test_reserved_key_collision(context):
    tx = _captured('linreg:B>A', context, CaptureMode.EMBEDDED, Representation.EVENTS)
    record = extract_record(tx, context.resources)
    with pytest.raises(ReservedKeyCollision):
        attach_provenance(tx, record)


def test_unknown_standard_kept_opaque(resources):
    body = b'<provenance/>'
    digest = resources.put(body)
    record = ProvenanceRecord(
        CaptureMode.REFERENCE,
        reference=ProvenanceReference('W3C-PROV-XML', ResourceStore.uri_for(digest), digest),
    )
    tx = Transaction('a' * 64, 'b' * 64, 'x', 'workflow_execution', 1)
    tx = tx.with_state(attach_provenance(tx, record))
    extracted = extract_record(tx, resources)
    assert extracted.opaque == body
    with pytest.raises(IrrecoverableRecord):
        reconstruct_workflow(extracted)


def test_unparseable_embedded_record():
    tx = Transaction('a' * 64, 'b' * 64, 'x', 'workflow_execution', 1,
                     {KEY_EMBEDDED: '{"tree":{}}'})
    with pytest.raises(IrrecoverableRecord):
        extract_record(tx, ResourceStore())


def test_reconstruct_from_events_without_workflow(context):
    workflow, result = _execute('scale:B>S@factor=3,linreg:S>A,store:A>F', context)
    events = build_event_record(result.execution_trace, workflow, embed_workflow=False)
    record = ProvenanceRecord(CaptureMode.EMBEDDED, embedded=EmbeddedProvenance(events=events))
    assert reconstruct_workflow(record) == workflow


def test_reconstruct_from_tree(context):
    workflow, result = _execute('scale:B>S@factor=3,scale:S>T@factor=-1,linreg:T>A,store:A>F',
                                context)
    tree = build_tree_record(result.execution_trace, workflow)
    record = ProvenanceRecord(CaptureMode.EMBEDDED, embedded=EmbeddedProvenance(tree=tree))
    rebuilt = reconstruct_workflow(record)
    assert rebuilt == workflow
    replay = run_workflow(rebuilt, ExecutionContext(context.datasets, ResourceStore()), 10)
    assert replay.output_digests == result.output_digests


def _committed(chain_tx):
    chain = Chain()
    seal_block([chain_tx], chain, accepted={chain_tx.tx_hex})
    return chain


def test_derive_with_renames(context, signers):
    tx = _captured('linreg:B>A,store:A>C', context, CaptureMode.BOTH, Representation.EVENTS)
    tx = Transaction(signers[0].member_id, signers[1].member_id, tx.asset_id, tx.contract_id,
                     tx.logical_time, tx.state).signed(signers[0])
    chain = _committed(tx)

    derived = derive_workflow(chain, tx.tx_hex, WorkflowModification(dataset_renames={'B': 'D'}),
                              logical_time=20, asset_id='fitD')
    assert derived.state[PARENT_KEY] == tx.tx_hex
    assert derived.asset_id == 'fitD'
    assert derived.initiator == tx.initiator
    assert derived.signature is None
    assert parse_workflow_notation('linreg:D>A,store:A>C').serialize() == \
        derived.state[WORKFLOW_KEY]


def test_duplicate_keeps_workflow_and_parent(context, signers):
    tx = _captured('linreg:B>A', context, CaptureMode.EMBEDDED, Representation.TREE)
    tx = Transaction(signers[0].member_id, signers[1].member_id, tx.asset_id, tx.contract_id,
                     tx.logical_time, tx.state).signed(signers[0])
    chain = _committed(tx)
    copy = derive_workflow(chain, tx, logical_time=11)
    assert copy.state[WORKFLOW_KEY] == tx.state[WORKFLOW_KEY]
    assert copy.state[PARENT_KEY] == tx.tx_hex


def test_derive_from_provenance_only(context, signers):
    workflow, result = _execute('scale:B>S@factor=2,linreg:S>A', context)
    tx = Transaction(signers[0].member_id, signers[1].member_id, 'asset', 'workflow_execution', 10)
    tx = capture_provenance(tx, result, workflow, CaptureMode.REFERENCE,
                            Representation.TREE, context.resources).signed(signers[0])
    assert WORKFLOW_KEY not in tx.state
    chain = _committed(tx)
    derived = derive_workflow(chain, tx.tx_id, logical_time=30, resources=context.resources)
    assert derived.state[WORKFLOW_KEY] == workflow.serialize()


def test_derive_unknown_parent():
    with pytest.raises(UnknownParent):
        derive_workflow(Chain(), 'f' * 64, logical_time=1)
