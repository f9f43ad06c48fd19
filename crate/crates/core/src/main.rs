fn main() {
    std::process::exit(reglu::cli::main());
}
