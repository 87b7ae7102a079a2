fn main() {
    std::process::exit(pointmpm::cli::main());
}
