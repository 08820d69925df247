fn main() {
    std::process::exit(dynvo_cli::dispatch(std::env::args_os()));
}
