fn main() {
    std::process::exit(occuseg::cli::main());
}
