fn main() {
    std::process::exit(sketchguide_cli::cli::main_with(std::env::args_os()));
}
