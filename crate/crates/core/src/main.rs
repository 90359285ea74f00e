fn main() {
    std::process::exit(groupscale::cli::run(std::env::args_os()));
}
