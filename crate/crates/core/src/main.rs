fn main() {
    splatray::cli::main();
}
