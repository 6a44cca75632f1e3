fn main() {
    std::process::exit(anchored_lvm::cli::main());
}
