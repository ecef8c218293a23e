#[path = "support/gradcheck.rs"]
mod suite;

#[test]
fn every_primitive_passes_central_differences() {
    suite::primitives();
}

#[test]
fn layer_regions_pass_central_differences() {
    suite::regions();
}
