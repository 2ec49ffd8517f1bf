fn main() {
    std::process::exit(mgpf::cli::main_entry());
}
