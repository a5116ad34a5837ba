fn main() {
    std::process::exit(haap::run_cli());
}
