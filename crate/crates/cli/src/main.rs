fn main() {
    std::process::exit(socprob::run());
}
