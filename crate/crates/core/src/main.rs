fn main() {
    gibbsforge::cli::main()
}
