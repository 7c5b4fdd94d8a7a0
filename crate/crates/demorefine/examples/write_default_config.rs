fn main() {
    let cfg = demorefine::harness::BenchmarkConfig::default();
    demorefine::harness::write_config(std::path::Path::new("configs/default.toml"), &cfg).unwrap();
    println!("wrote configs/default.toml");
}
