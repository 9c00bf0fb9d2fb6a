fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    gridspot::retain_heap_memory();
    std::process::exit(gridspot::cli::run(std::env::args_os()));
}
