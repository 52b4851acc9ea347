fn main() {
    std::process::exit(mixedboot::cli::main_entry());
}
