fn main() {
    eigenmerge::cli::main()
}
