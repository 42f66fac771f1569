import numpy as np
import pytest

from ledgerflow.core.canonical import compute_digest
from ledgerflow.core.contracts import (
    WORKFLOW_KEY,
    Contract,
    ContractRegistry,
    ContractResult,
    ExecutionContext,
    Step,
    WorkflowDescription,
    default_contract_registry,
    execute_contract,
    parse_workflow_notation,
    register_contract,
    run_workflow,
    step_linreg,
    step_scale,
)
from ledgerflow.core.ledger import Transaction
from ledgerflow.core.storage import ResourceStore, encode_dataset
from ledgerflow.utils.errors import (
    ContractNotFound,
    DegenerateInput,
    DuplicateContract,
    MalformedWorkflow,
    StepFailure,
)


def _workflow_tx(notation: str, time: int = 10) -> Transaction:
    workflow = parse_workflow_notation(notation)
    return Transaction('a' * 64, 'b' * 64, 'asset', 'workflow_execution', time,
                       {WORKFLOW_KEY: workflow.serialize()})


def test_notation_builds_fixed_roles():
    workflow = parse_workflow_notation('scale:B>B2@factor=2,linreg:B2>A,store:A>C')
    assert [step.op for step in workflow.steps] == ['scale', 'linreg', 'store']
    assert workflow.steps[0] == Step('scale', {'points': 'B'}, {'scaled': 'B2'}, {'factor': '2'})
    assert workflow.input_names == ['B']
    assert workflow.output_names == ['B2', 'A', 'C']


@pytest.mark.parametrize('notation', [
    'fit:B>A',
    'linreg:B',
    'linreg:B>A,store:X>A',
    'store:A>C,linreg:B>A',
    'linreg:B>A,scale:B>S@factor=2',
    'linreg:B>A,store:D>F',
    'store:B>F,store:F>G',
    'scale:B>C',
    'scale:B>C@factor=abc',
    'linreg:B>A@factor',
    ','.join(f"scale:S{i}>S{i + 1}@factor=1" for i in range(11)),
])
def test_malformed_notation(notation):
    with pytest.raises(MalformedWorkflow):
        parse_workflow_notation(notation)


@pytest.mark.parametrize('notation,final', [
    ('linreg:B>A,store:A>C', 'A'),
    ('scale:B>S@factor=0.5,store:S>F', 'S'),
    ('store:B>F', 'B'),
    ('scale:B>S1@factor=3,scale:S1>S2@factor=-1,linreg:S2>A,store:A>F', 'A'),
])
def test_final_result_reaches_every_name(notation, final):
    workflow = parse_workflow_notation(notation)
    assert workflow.final_name == final
    assert workflow.unreachable_names() == []


def test_unreachable_names_listed_in_order():
    workflow = WorkflowDescription((Step.simple('linreg', 'B', 'A'),
                                    Step.simple('store', 'D', 'F')))
    assert workflow.unreachable_names() == ['D', 'F']


def test_workflow_serialization_is_canonical():
    workflow = parse_workflow_notation('linreg:B>A,store:A>C')
    assert WorkflowDescription.parse(workflow.serialize()) == workflow
    with pytest.raises(MalformedWorkflow):
        WorkflowDescription.parse('{"steps": []}')


def test_substitute_renames_datasets():
    workflow = parse_workflow_notation('linreg:B>A,store:A>C')
    renamed = workflow.substitute({'B': 'D'})
    assert renamed.input_names == ['D']
    assert renamed.output_names == ['A', 'C']


def test_linreg_exact_line(context):
    tx = _workflow_tx('linreg:B>A,store:A>C')
    result = execute_contract('workflow_execution', tx, context.datasets, context.resources)
    assert result.state_entries['linreg.A.slope'] == '2'
    assert result.state_entries['linreg.A.intercept'] == '1'
    assert result.output_digests['A'] == compute_digest(encode_dataset([(2.0, 1.0)]))
    uri = result.state_entries['store.C.uri']
    assert context.resources.get(uri) == encode_dataset([(2.0, 1.0)])


def test_trace_records_each_step(context):
    tx = _workflow_tx('scale:B>B2@factor=2,linreg:B2>A', time=7)
    result = execute_contract('workflow_execution', tx, context.datasets, context.resources)
    assert [(e.step_index, e.op, e.logical_time) for e in result.execution_trace] == [
        (0, 'scale', 7), (1, 'linreg', 8)]
    first, second = result.execution_trace
    assert first.output_digests['B2'] == second.input_digests['B2']
    assert first.input_digests['B'] == compute_digest(context.datasets.get_bytes('B'))
    assert result.state_entries['linreg.A.slope'] == '4'
    assert result.state_entries['out.A'] == result.output_digests['A'].hex()


def test_execution_is_deterministic(context):
    tx = _workflow_tx('scale:B>S@factor=0.5,linreg:S>A,store:A>F')
    first = execute_contract('workflow_execution', tx, context.datasets, context.resources)
    second = execute_contract('workflow_execution', tx, context.datasets, context.resources)
    assert first.canonical_bytes() == second.canonical_bytes()


def test_missing_dataset_fails_step(context):
    tx = _workflow_tx('linreg:missing>A')
    with pytest.raises(StepFailure) as excinfo:
        execute_contract('workflow_execution', tx, context.datasets, context.resources)
    assert excinfo.value.step_index == 0


def test_degenerate_input_fails_step(context):
    context.datasets.put_points('flat', [(1.0, 2.0), (1.0, 3.0)])
    tx = _workflow_tx('scale:flat>S@factor=2,linreg:S>A')
    with pytest.raises(StepFailure) as excinfo:
        execute_contract('workflow_execution', tx, context.datasets, context.resources)
    assert excinfo.value.step_index == 1


def test_linreg_direct():
    with pytest.raises(DegenerateInput):
        step_linreg([(1.0, 1.0)])
    slope, intercept = step_linreg([(0.0, 0.0), (1.0, 1.0), (2.0, 2.5)])
    expected = np.polyfit([0.0, 1.0, 2.0], [0.0, 1.0, 2.5], 1)
    assert slope == pytest.approx(expected[0], rel=1e-12)
    assert intercept == pytest.approx(expected[1], abs=1e-12)
    assert step_scale([(1.0, 2.0)], -3.0) == [(1.0, -6.0)]


def test_unknown_contract(context):
    tx = _workflow_tx('linreg:B>A')
    with pytest.raises(ContractNotFound):
        execute_contract('nope', tx, context.datasets)


def test_register_duplicate_contract():
    registry = default_contract_registry()
    assert registry.ids() == ['data_staging', 'workflow_execution']
    contract = registry.get('workflow_execution')
    with pytest.raises(DuplicateContract):
        register_contract(registry, contract)


def test_contract_output_cannot_use_reserved_keys(context):
    registry = ContractRegistry()
    register_contract(registry, Contract(
        'sneaky', 'writes a reserved key',
        lambda tx, ctx: ContractResult({'prov.embedded': 'x'}),
        lambda state: True,
    ))
    tx = _workflow_tx('linreg:B>A')
    with pytest.raises(MalformedWorkflow):
        execute_contract('sneaky', tx, context.datasets, registry=registry)


def test_preconditions():
    registry = default_contract_registry()
    workflow = registry.get('workflow_execution')
    assert workflow.precondition({WORKFLOW_KEY: parse_workflow_notation('linreg:B>A').serialize()})
    assert not workflow.precondition({WORKFLOW_KEY: 'not a workflow'})
    assert not workflow.precondition({})
    staging = registry.get('data_staging')
    assert staging.precondition({'datasets': 'B,D'})
    assert not staging.precondition({'datasets': ' '})


def test_staging_contract(context):
    tx = Transaction('a' * 64, 'b' * 64, 'staged', 'data_staging', 1, {'datasets': 'B,D'})
    result = execute_contract('data_staging', tx, context.datasets, context.resources)
    assert set(result.state_entries) == {'staged.B', 'staged.D'}
    assert context.resources.get(result.state_entries['staged.B']) == \
        context.datasets.get_bytes('B')


def test_run_workflow_directly(datasets):
    workflow = parse_workflow_notation('linreg:B>A')
    result = run_workflow(workflow, ExecutionContext(datasets, ResourceStore()), 3)
    assert result.execution_trace[0].logical_time == 3
