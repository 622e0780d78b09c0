fn main() {
    std::process::exit(ntklab::expcli::run(std::env::args_os()));
}
