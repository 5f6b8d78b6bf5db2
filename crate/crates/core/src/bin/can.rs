fn main() {
    std::process::exit(can_hmer::cli::main());
}
