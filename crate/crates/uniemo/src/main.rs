fn main() {
    std::process::exit(uniemo::cli::dispatch(std::env::args()));
}
