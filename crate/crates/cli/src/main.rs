fn main() {
    std::process::exit(usbone::run(std::env::args_os()));
}
