use timba::gradcheck::{gradient_suite, TOLERANCE};

#[test]
fn every_op_and_block_matches_finite_differences() {
    let checks = gradient_suite(7).unwrap();
    let names: Vec<&str> = checks.iter().map(|c| c.name.as_str()).collect();
    for block in ["mamba_uni", "mamba_bi", "mpnn", "virtual_node_attention", "cfem", "nem", "end_to_end_loss"] {
        assert!(names.iter().any(|n| n.starts_with(block)), "{block} missing from {names:?}");
    }
    for c in &checks {
        assert!(c.checked > 0, "{} checked nothing", c.name);
        assert!(c.max_rel_error < TOLERANCE, "{}: {:.3e} at {:?}", c.name, c.max_rel_error, c.worst_values);
    }
}
