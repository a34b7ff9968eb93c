fn main() {
    std::process::exit(mpgan_cli::dispatch(std::env::args_os()));
}
