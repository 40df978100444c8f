fn main() {
    std::process::exit(qmlib::cli::main());
}
