fn main() {
    std::process::exit(reknet::cli::main_exit());
}
