fn main() { std::process::exit(softsense::cli::run(std::env::args_os())); }
